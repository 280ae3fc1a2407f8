//! Dense tensors, a taped graph, and reverse-mode gradients.

mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use graph::{backward, backward_from, forward_ops, Graph, NodeId, PROB_CLAMP};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Gradients keyed by parameter name. A missing entry is a zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, grad: Tensor) {
        self.grads.insert(name.to_string(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, inserting entries missing on the left.
    pub fn accumulate(&mut self, other: &GradientMap, scale: f64) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => mine.add_assign_scaled(g, scale),
                None => {
                    let mut g = g.clone();
                    g.scale_in_place(scale);
                    self.grads.insert(name.clone(), g);
                }
            }
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.grads.retain(|k, _| keep(k));
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().for_each(|g| g.scale_in_place(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// Binary cross-entropy averaged over answers, with predictions clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn bce_loss(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::LengthMismatch(target.len(), predicted.len()));
    }
    if target.is_empty() {
        return Err(Error::Config("bce_loss on empty vectors".into()));
    }
    Ok(graph::bce_value(target, predicted))
}

/// Squared L2 norm of the fused embedding.
pub fn compat_loss(h: &[f64]) -> Result<f64> {
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            node: 0,
            op: "compat_loss",
        });
    }
    Ok(h.iter().map(|x| x * x).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sigmoid_midpoint() {
        let mut g = Graph::new();
        let x = g.input(vector(&[0.0]));
        g.sigmoid(x).unwrap();
        assert_eq!(forward_ops(&mut g).unwrap().item(), 0.5);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 3, vec![0.7; 3]).unwrap());
        g.softmax_rows(x).unwrap();
        let out = forward_ops(&mut g).unwrap();
        for &p in out.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn squared_norm() {
        let mut g = Graph::new();
        let x = g.input(vector(&[3.0, 4.0]));
        g.sum_squares(x).unwrap();
        assert_eq!(forward_ops(&mut g).unwrap().item(), 25.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", vector(&[2.0]));
        let sq = g.mul(x, x).unwrap();
        g.sum(sq).unwrap();
        let grads = backward(&g, ["x"]).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[4.0]);
    }

    #[test]
    fn disconnected_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param("x", vector(&[1.0, 2.0]));
        g.param("unused", vector(&[5.0, 6.0, 7.0]));
        g.sum_squares(x).unwrap();
        let grads = backward(&g, ["x", "unused"]).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_gradient_through_sigmoid_matches_finite_difference() {
        let mut g = Graph::new();
        let z = g.param("z", vector(&[0.0]));
        let p = g.sigmoid(z).unwrap();
        g.bce(p, vector(&[1.0])).unwrap();
        let analytic = backward(&g, ["z"]).unwrap().get("z").unwrap().item();
        let numeric = central_diff(|z| -graph::sigmoid(z).ln(), 0.0);
        assert!((numeric - -0.5).abs() < 1e-9);
        assert!((analytic - numeric).abs() < 1e-9);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", vector(&[1.0, 2.0]));
        g.tanh(x).unwrap();
        assert!(matches!(backward(&g, ["x"]), Err(Error::NonScalar(_))));
    }

    #[test]
    fn unknown_param_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", vector(&[1.0]));
        g.sum(x).unwrap();
        assert!(matches!(backward(&g, ["y"]), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn shape_mismatch_names_node_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, shapes }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0], &[1.0 - PROB_CLAMP]).unwrap() < 1e-6);
        assert!((bce_loss(&[1.0], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.0, 1.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(bce_loss(&[1.0], &[0.5, 0.5]), Err(Error::LengthMismatch(1, 2))));
        // Clamping keeps a hard miss finite.
        assert!(bce_loss(&[1.0], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn compat_examples() {
        assert_eq!(compat_loss(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(compat_loss(&[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(compat_loss(&[1.0; 4]).unwrap(), 4.0);
        assert!(compat_loss(&[f64::NAN]).is_err());
    }

    #[test]
    fn replay_after_param_update() {
        let mut g = Graph::new();
        let x = g.param("x", vector(&[1.0]));
        let y = g.mul(x, x).unwrap();
        g.sum(y).unwrap();
        g.set_param("x", vector(&[3.0])).unwrap();
        assert_eq!(forward_ops(&mut g).unwrap().item(), 9.0);
        assert_eq!(backward(&g, ["x"]).unwrap().get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn clip_global_norm() {
        let mut m = GradientMap::new();
        m.insert("a", vector(&[30.0, 40.0]));
        let before = m.clip_global_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((m.global_norm() - 10.0).abs() < 1e-12);
    }
}
