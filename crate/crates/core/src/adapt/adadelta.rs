use std::collections::BTreeMap;

use crate::diffcore::{GradientMap, Tensor};
use crate::error::{Error, Result};

/// Running averages `E[g²]` and `E[Δ²]` per tensor. Tensors are created
/// lazily at zero the first time they receive a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaDeltaState {
    pub(crate) sq_grad: BTreeMap<String, Tensor>,
    pub(crate) sq_delta: BTreeMap<String, Tensor>,
}

impl AdaDeltaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sq_grad(&self, name: &str) -> Option<&Tensor> {
        self.sq_grad.get(name)
    }

    pub fn sq_delta(&self, name: &str) -> Option<&Tensor> {
        self.sq_delta.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.sq_grad.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.sq_grad
            .iter()
            .map(|(k, g)| (k.as_str(), g, &self.sq_delta[k]))
    }

    pub fn insert(&mut self, name: &str, sq_grad: Tensor, sq_delta: Tensor) -> Result<()> {
        if sq_grad.shape() != sq_delta.shape() {
            return Err(Error::Config(format!("accumulator shapes differ for `{name}`")));
        }
        self.sq_grad.insert(name.to_string(), sq_grad);
        self.sq_delta.insert(name.to_string(), sq_delta);
        Ok(())
    }
}

/// Output of one AdaDelta update.
pub struct AdaDeltaUpdate {
    /// The parameter change `Δ` (already negated).
    pub delta: GradientMap,
    /// Elementwise step size `sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε)` used for this update.
    pub step_size: GradientMap,
}

/// One AdaDelta update, in place on `state`:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1-ρ) g²
/// Δ     ← -sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) · g
/// E[Δ²] ← ρ E[Δ²] + (1-ρ) Δ²
/// ```
///
/// Tensors tracked by `state` but absent from `grad` are treated as zero
/// gradient: both accumulators decay and their `Δ` is zero (and omitted).
pub fn adadelta_update(
    state: &mut AdaDeltaState,
    grad: &GradientMap,
    rho: f64,
    eps: f64,
) -> Result<AdaDeltaUpdate> {
    let mut delta = GradientMap::new();
    let mut step_size = GradientMap::new();
    for (name, g) in grad.iter() {
        let sq_g = state
            .sq_grad
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros_like(g));
        let sq_d = state
            .sq_delta
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros_like(g));
        if sq_g.shape() != g.shape() {
            return Err(Error::Config(format!("gradient for `{name}` changed shape")));
        }
        let n = g.len();
        let mut d = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for ((eg, ed), &gi) in sq_g
            .data_mut()
            .iter_mut()
            .zip(sq_d.data_mut().iter_mut())
            .zip(g.data())
        {
            *eg = rho * *eg + (1.0 - rho) * gi * gi;
            let scale = (*ed + eps).sqrt() / (*eg + eps).sqrt();
            let di = -scale * gi;
            *ed = rho * *ed + (1.0 - rho) * di * di;
            d.push(di);
            c.push(scale);
        }
        delta.insert(name, Tensor::new(g.shape().to_vec(), d)?);
        step_size.insert(name, Tensor::new(g.shape().to_vec(), c)?);
    }
    for (name, sq_g) in state.sq_grad.iter_mut() {
        if grad.get(name).is_none() {
            sq_g.scale_in_place(rho);
            if let Some(sq_d) = state.sq_delta.get_mut(name) {
                sq_d.scale_in_place(rho);
            }
        }
    }
    Ok(AdaDeltaUpdate { delta, step_size })
}

/// [`adadelta_update`] returning only `Δ`.
pub fn adadelta_step(
    state: &mut AdaDeltaState,
    grad: &GradientMap,
    rho: f64,
    eps: f64,
) -> Result<GradientMap> {
    Ok(adadelta_update(state, grad, rho, eps)?.delta)
}
