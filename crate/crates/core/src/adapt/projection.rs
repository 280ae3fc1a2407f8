use std::collections::BTreeMap;

use crate::diffcore::{GradientMap, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelWeights;

/// Elementwise gradient scales, one tensor per model weight, no biases and no
/// mixing across elements.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    psi: BTreeMap<String, Tensor>,
}

impl ProjectionParams {
    pub fn filled(weights: &ModelWeights, value: f64) -> Self {
        ProjectionParams {
            psi: weights
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::full(t.shape(), value)))
                .collect(),
        }
    }

    /// Identity projection.
    pub fn ones(weights: &ModelWeights) -> Self {
        Self::filled(weights, 1.0)
    }

    pub fn zeros(weights: &ModelWeights) -> Self {
        Self::filled(weights, 0.0)
    }

    pub fn from_tensors(weights: &ModelWeights, psi: BTreeMap<String, Tensor>) -> Result<Self> {
        for (name, t) in weights.iter() {
            match psi.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Config(format!("projection for `{name}` missing or misshapen"))),
            }
        }
        if psi.len() != weights.tensors().len() {
            return Err(Error::Config("projection has tensors the model lacks".into()));
        }
        Ok(ProjectionParams { psi })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.psi.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.psi.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.psi.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn apply(&mut self, delta: &GradientMap, scale: f64) -> Result<()> {
        for (name, d) in delta.iter() {
            let p = self
                .psi
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            p.add_assign_scaled(d, scale);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.psi.values().all(Tensor::all_finite)
    }
}

/// `out[name] = psi[name] ⊙ grad[name]`; names absent from `grad` stay absent.
pub fn project_gradients(psi: &ProjectionParams, grad: &GradientMap) -> Result<GradientMap> {
    let mut out = GradientMap::new();
    for (name, g) in grad.iter() {
        let p = psi
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let projected = p.zip_map(g, |a, b| a * b).ok_or_else(|| Error::Shape {
            node: 0,
            op: "project_gradients",
            shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
        })?;
        out.insert(name, projected);
    }
    Ok(out)
}
