//! Taped computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is always a valid
//! topological order. Every node keeps the configuration needed to re-evaluate
//! it, which lets callers swap parameter values and replay the same graph
//! (see [`Graph::set_param`] and [`forward_ops`]).

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::GradientMap;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to predicted probabilities inside BCE.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    EmbeddingMean { table: NodeId, bags: Vec<Vec<usize>> },
    GroupMean { x: NodeId, group: usize },
    RepeatRows { x: NodeId, times: usize },
    Reshape { x: NodeId, shape: Vec<usize> },
    SoftmaxRows(NodeId),
    WeightedGroupSum { weights: NodeId, x: NodeId },
    Bce { pred: NodeId, target: Tensor },
    SumSquares(NodeId),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::EmbeddingMean { .. } => "embedding_mean",
            Op::GroupMean { .. } => "group_mean",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::WeightedGroupSum { .. } => "weighted_group_sum",
            Op::Bce { .. } => "bce",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::SoftmaxRows(a) => vec![*a],
            Op::SumSquares(a) | Op::Sum(a) => vec![*a],
            Op::EmbeddingMean { table, .. } => vec![*table],
            Op::GroupMean { x, .. } | Op::RepeatRows { x, .. } | Op::Reshape { x, .. } => vec![*x],
            Op::WeightedGroupSum { weights, x } => vec![*weights, *x],
            Op::Bce { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The node added last; this is what [`forward_ops`] and [`backward`] treat as the output.
    pub fn output(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a named parameter. Registering an existing name returns the existing node.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Replaces the value of a parameter. Values downstream are stale until
    /// [`Graph::recompute`] (or [`forward_ops`]) runs.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let node = &mut self.nodes[id.0];
        if node.value.shape() != value.shape() {
            return Err(Error::Shape {
                node: id.0,
                op: "param",
                shapes: vec![node.value.shape().to_vec(), value.shape().to_vec()],
            });
        }
        node.value = value;
        Ok(())
    }

    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) || node.value.shape() != value.shape() {
            return Err(Error::Shape {
                node: id.0,
                op: node.op.name(),
                shapes: vec![node.value.shape().to_vec(), value.shape().to_vec()],
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = self.eval(index, &op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `a[r, c] + b[c]` for every row `r`.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(a, b))
    }

    /// Affine map `x W + b` with `W: [in, out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    /// Row `n` of the output is the mean of the table rows listed in `bags[n]`.
    pub fn embedding_mean(&mut self, table: NodeId, bags: Vec<Vec<usize>>) -> Result<NodeId> {
        self.push(Op::EmbeddingMean { table, bags })
    }

    /// Mean over consecutive groups of `group` rows: `[n*group, f] -> [n, f]`.
    pub fn group_mean(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        self.push(Op::GroupMean { x, group })
    }

    /// Repeats each row `times` times consecutively: `[n, f] -> [n*times, f]`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        self.push(Op::RepeatRows { x, times })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(a))
    }

    /// `out[n] = sum_g weights[n, g] * x[n*G + g]` with `weights: [n, G]`.
    pub fn weighted_group_sum(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::WeightedGroupSum { weights, x })
    }

    /// Binary cross-entropy averaged over every entry; `pred` is clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        self.push(Op::Bce { pred, target })
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    /// Re-evaluates every non-leaf node in order.
    pub fn recompute(&mut self) -> Result<()> {
        for index in 0..self.nodes.len() {
            if matches!(self.nodes[index].op, Op::Input | Op::Param) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[index].op, Op::Input);
            let value = self.eval(index, &op);
            self.nodes[index].op = op;
            self.nodes[index].value = value?;
        }
        Ok(())
    }

    fn shape_err(&self, index: usize, op: &Op) -> Error {
        Error::Shape {
            node: index,
            op: op.name(),
            shapes: op
                .inputs()
                .iter()
                .map(|i| self.nodes[i.0].value.shape().to_vec())
                .collect(),
        }
    }

    fn eval(&self, index: usize, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let bad = || self.shape_err(index, op);
        let out = match op {
            Op::Input | Op::Param => unreachable!("leaves are never evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if !is_matrix(a) || !is_matrix(b) || a.shape()[1] != b.shape()[0] {
                    return Err(bad());
                }
                matmul(a, b)
            }
            Op::AddBias(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.len() != a.cols() {
                    return Err(bad());
                }
                let mut out = a.clone();
                let c = a.cols();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += b.data()[i % c];
                }
                out
            }
            Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y).ok_or_else(bad)?,
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y).ok_or_else(bad)?,
            Op::Scale(a, s) => v(a).map(|x| x * s),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::EmbeddingMean { table, bags } => {
                let table = v(table);
                if !is_matrix(table) || bags.is_empty() {
                    return Err(bad());
                }
                let (vocab, dim) = (table.shape()[0], table.shape()[1]);
                let mut data = vec![0.0; bags.len() * dim];
                for (n, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        return Err(Error::EmptyTokens);
                    }
                    let inv = 1.0 / bag.len() as f64;
                    let out = &mut data[n * dim..(n + 1) * dim];
                    for &t in bag {
                        if t >= vocab {
                            return Err(Error::TokenOutOfRange {
                                index: t,
                                vocab_size: vocab,
                            });
                        }
                        for (o, &e) in out.iter_mut().zip(table.row(t)) {
                            *o += e * inv;
                        }
                    }
                }
                Tensor::new(vec![bags.len(), dim], data)?
            }
            Op::GroupMean { x, group } => {
                let x = v(x);
                if !is_matrix(x) || *group == 0 || x.rows() % group != 0 {
                    return Err(bad());
                }
                let (n, f) = (x.rows() / group, x.cols());
                let inv = 1.0 / *group as f64;
                let mut data = vec![0.0; n * f];
                for r in 0..x.rows() {
                    let out = &mut data[(r / group) * f..(r / group + 1) * f];
                    for (o, &e) in out.iter_mut().zip(x.row(r)) {
                        *o += e * inv;
                    }
                }
                Tensor::new(vec![n, f], data)?
            }
            Op::RepeatRows { x, times } => {
                let x = v(x);
                if !is_matrix(x) || *times == 0 {
                    return Err(bad());
                }
                let mut data = Vec::with_capacity(x.len() * times);
                for r in 0..x.rows() {
                    for _ in 0..*times {
                        data.extend_from_slice(x.row(r));
                    }
                }
                Tensor::new(vec![x.rows() * times, x.cols()], data)?
            }
            Op::Reshape { x, shape } => v(x).reshape(shape).map_err(|_| bad())?,
            Op::SoftmaxRows(a) => {
                let a = v(a);
                if !is_matrix(a) {
                    return Err(bad());
                }
                let c = a.cols();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(c) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                out
            }
            Op::WeightedGroupSum { weights, x } => {
                let (w, x) = (v(weights), v(x));
                if !is_matrix(w) || !is_matrix(x) || w.len() != x.rows() {
                    return Err(bad());
                }
                let (n, g, f) = (w.rows(), w.cols(), x.cols());
                let mut data = vec![0.0; n * f];
                for i in 0..n {
                    let out = &mut data[i * f..(i + 1) * f];
                    for j in 0..g {
                        let wij = w.data()[i * g + j];
                        for (o, &e) in out.iter_mut().zip(x.row(i * g + j)) {
                            *o += wij * e;
                        }
                    }
                }
                Tensor::new(vec![n, f], data)?
            }
            Op::Bce { pred, target } => {
                let p = v(pred);
                if p.shape() != target.shape() {
                    return Err(bad());
                }
                Tensor::scalar(bce_value(target.data(), p.data()))
            }
            Op::SumSquares(a) => Tensor::scalar(v(a).sum_squares()),
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
        };
        if !out.all_finite() {
            return Err(Error::NonFinite {
                node: index,
                op: op.name(),
            });
        }
        Ok(out)
    }

    /// Accumulates the adjoint of a single node into its inputs.
    fn backprop_node(&self, index: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[index];
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, g: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, matmul_bt(grad, v(b)));
                }
                if needs(b) {
                    acc(*b, matmul_at(v(a), grad));
                }
            }
            Op::AddBias(a, b) => {
                if needs(a) {
                    acc(*a, grad.clone());
                }
                if needs(b) {
                    let c = grad.cols();
                    let mut gb = vec![0.0; c];
                    for (i, &g) in grad.data().iter().enumerate() {
                        gb[i % c] += g;
                    }
                    acc(*b, Tensor::new(v(b).shape().to_vec(), gb).expect("bias shape"));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(*a, grad.clone());
                }
                if needs(b) {
                    acc(*b, grad.clone());
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, grad.zip_map(v(b), |g, y| g * y).expect("mul shape"));
                }
                if needs(b) {
                    acc(*b, grad.zip_map(v(a), |g, x| g * x).expect("mul shape"));
                }
            }
            Op::Scale(a, s) => acc(*a, grad.map(|g| g * s)),
            Op::Tanh(a) => acc(
                *a,
                grad.zip_map(&node.value, |g, y| g * (1.0 - y * y))
                    .expect("tanh shape"),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                grad.zip_map(&node.value, |g, y| g * y * (1.0 - y))
                    .expect("sigmoid shape"),
            ),
            Op::EmbeddingMean { table, bags } => {
                let t = v(table);
                let dim = t.cols();
                let mut gt = Tensor::zeros_like(t);
                let gdata = gt.data_mut();
                for (n, bag) in bags.iter().enumerate() {
                    let inv = 1.0 / bag.len() as f64;
                    let g = grad.row(n);
                    for &tok in bag {
                        for (o, &gi) in gdata[tok * dim..(tok + 1) * dim].iter_mut().zip(g) {
                            *o += gi * inv;
                        }
                    }
                }
                acc(*table, gt);
            }
            Op::GroupMean { x, group } => {
                let xv = v(x);
                let f = xv.cols();
                let inv = 1.0 / *group as f64;
                let mut data = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    data.extend(grad.row(r / group).iter().map(|g| g * inv));
                }
                acc(*x, Tensor::new(vec![xv.rows(), f], data).expect("group shape"));
            }
            Op::RepeatRows { x, times } => {
                let xv = v(x);
                let f = xv.cols();
                let mut data = vec![0.0; xv.len()];
                for r in 0..grad.rows() {
                    let out = &mut data[(r / times) * f..(r / times + 1) * f];
                    for (o, &g) in out.iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), data).expect("repeat shape"));
            }
            Op::Reshape { x, .. } => {
                acc(*x, grad.reshape(v(x).shape()).expect("reshape shape"));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(grad.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), out).expect("softmax shape"));
            }
            Op::WeightedGroupSum { weights, x } => {
                let (w, xv) = (v(weights), v(x));
                let (n, g, f) = (w.rows(), w.cols(), xv.cols());
                if needs(weights) {
                    let mut gw = vec![0.0; w.len()];
                    for i in 0..n {
                        for j in 0..g {
                            gw[i * g + j] = grad
                                .row(i)
                                .iter()
                                .zip(xv.row(i * g + j))
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    acc(*weights, Tensor::new(w.shape().to_vec(), gw).expect("w shape"));
                }
                if needs(x) {
                    let mut gx = vec![0.0; xv.len()];
                    for i in 0..n {
                        for j in 0..g {
                            let wij = w.data()[i * g + j];
                            let out = &mut gx[(i * g + j) * f..(i * g + j + 1) * f];
                            for (o, &gi) in out.iter_mut().zip(grad.row(i)) {
                                *o += wij * gi;
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx).expect("x shape"));
                }
            }
            Op::Bce { pred, target } => {
                let g0 = grad.item();
                let p = v(pred);
                let inv = 1.0 / p.len() as f64;
                let gp = p
                    .zip_map(target, |p, s| {
                        if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            -g0 * inv * (s / p - (1.0 - s) / (1.0 - p))
                        }
                    })
                    .expect("bce shape");
                acc(*pred, gp);
            }
            Op::SumSquares(a) => {
                let g0 = grad.item();
                acc(*a, v(a).map(|x| 2.0 * g0 * x));
            }
            Op::Sum(a) => {
                let g0 = grad.item();
                acc(*a, Tensor::full(v(a).shape(), g0));
            }
        }
    }
}

pub(crate) fn bce_value(target: &[f64], pred: &[f64]) -> f64 {
    let n = pred.len() as f64;
    -pred
        .iter()
        .zip(target)
        .map(|(&p, &s)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            s * p.ln() + (1.0 - s) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// `g B^T` for `g: [m, n]`, `B: [k, n]`.
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.shape()[0], g.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out).expect("matmul_bt shape")
}

/// `A^T g` for `A: [m, k]`, `g: [m, n]`.
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], g.shape()[1]);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = g.row(i);
        for p in 0..k {
            let x = a.data()[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("matmul_at shape")
}

/// Re-evaluates the graph and returns the value of its output node.
pub fn forward_ops(graph: &mut Graph) -> Result<Tensor> {
    graph.recompute()?;
    let out = graph
        .output()
        .ok_or_else(|| Error::Config("empty graph".into()))?;
    Ok(graph.value(out).clone())
}

/// Reverse-mode gradients of the output node with respect to the named
/// parameters. Registered parameters with no path to the output get zeros;
/// names never registered in the graph are an error.
pub fn backward<'a>(graph: &Graph, wrt: impl IntoIterator<Item = &'a str>) -> Result<GradientMap> {
    let out = graph
        .output()
        .ok_or_else(|| Error::Config("empty graph".into()))?;
    backward_from(graph, out, wrt)
}

pub fn backward_from<'a>(
    graph: &Graph,
    output: NodeId,
    wrt: impl IntoIterator<Item = &'a str>,
) -> Result<GradientMap> {
    let out_value = graph.value(output);
    if !out_value.is_scalar() {
        return Err(Error::NonScalar(out_value.shape().to_vec()));
    }
    let wanted: Vec<(&str, NodeId)> = wrt
        .into_iter()
        .map(|name| {
            graph
                .param_id(name)
                .map(|id| (name, id))
                .ok_or_else(|| Error::UnknownParam(name.to_string()))
        })
        .collect::<Result<_>>()?;

    let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
    grads[output.0] = Some(Tensor::new(out_value.shape().to_vec(), vec![1.0])?);
    for index in (0..=output.0).rev() {
        if !graph.nodes[index].requires_grad {
            continue;
        }
        if let Some(g) = grads[index].take() {
            if matches!(graph.nodes[index].op, Op::Param) {
                grads[index] = Some(g);
                continue;
            }
            graph.backprop_node(index, &g, &mut grads);
        }
    }

    let mut map = GradientMap::new();
    for (name, id) in wanted {
        let g = grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros_like(graph.value(id)));
        map.insert(name, g);
    }
    Ok(map)
}
