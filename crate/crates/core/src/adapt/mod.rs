//! Inner-loop adaptation on retrieved support, elementwise gradient
//! projection, AdaDelta step sizing and the first-order meta-update.

mod adadelta;
mod projection;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{GradientMap, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    compat_loss_graph, loss_and_gradients, names, vqa_loss_graph, CaptionInstance, ModelWeights,
    VqaInstance,
};
use crate::retrieval::{sample_k_prime, SupportEntry, SupportItem};

pub use adadelta::{adadelta_step, adadelta_update, AdaDeltaState, AdaDeltaUpdate};
pub use projection::{project_gradients, ProjectionParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportMode {
    /// Supervised BCE on retrieved question/answer pairs.
    Qa,
    /// Label-free compatibility loss on retrieved captions.
    Caption,
}

/// How the per-item adaptation losses of one step are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Rule turning the (projected) adaptation gradient into a weight change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    #[default]
    AdaDelta,
    /// `Δ = -alpha · d`. Test hook.
    FixedStep { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Number of inner steps.
    pub steps: usize,
    pub support_mode: SupportMode,
    pub use_projection: bool,
    pub adadelta_rho: f64,
    /// AdaDelta epsilon of the meta-update.
    pub adadelta_eps: f64,
    /// AdaDelta epsilon of the inner steps.
    pub inner_adadelta_eps: f64,
    /// Global L2 norm bound on inner and outer gradients; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub reduction: Reduction,
    /// How the main loss is combined over queries and answers for the meta-update.
    pub meta_reduction: Reduction,
    pub inner_optimizer: InnerOptimizer,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            steps: 3,
            support_mode: SupportMode::Qa,
            use_projection: false,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-5,
            inner_adadelta_eps: 1e-5,
            clip_norm: Some(10.0),
            reduction: Reduction::Sum,
            meta_reduction: Reduction::Sum,
            inner_optimizer: InnerOptimizer::AdaDelta,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_mode == SupportMode::Caption && !self.use_projection {
            return Err(Error::Config("caption support requires use_projection = true".into()));
        }
        if !(0.0..1.0).contains(&self.adadelta_rho) || !(self.adadelta_eps > 0.0 && self.inner_adadelta_eps > 0.0) {
            return Err(Error::Config(format!(
                "AdaDelta needs 0 <= rho < 1 and eps > 0, got rho={} eps={} inner eps={}",
                self.adadelta_rho, self.adadelta_eps, self.inner_adadelta_eps
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-query candidate pools over a shared list of support entries. Each
/// inner step draws `k_prime` items from every pool and adapts on all of them
/// together.
#[derive(Clone, Debug)]
pub struct RetrievedSupport<'a> {
    pub entries: &'a [SupportEntry],
    pub pools: Vec<Vec<usize>>,
    pub k_prime: usize,
}

impl<'a> RetrievedSupport<'a> {
    pub fn new(entries: &'a [SupportEntry], pools: Vec<Vec<usize>>, k_prime: usize) -> Self {
        RetrievedSupport {
            entries,
            pools,
            k_prime,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pools.iter().all(Vec::is_empty)
    }

    /// Indices drawn for one inner step, pool by pool.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.pools
            .iter()
            .flat_map(|p| sample_k_prime(p, self.k_prime, rng))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdaptedWeights {
    /// `θ_T`, a private copy.
    pub weights: ModelWeights,
    /// Adaptation loss measured before each inner update.
    pub losses: Vec<f64>,
    /// Sampled support indices of every step.
    pub samples: Vec<Vec<usize>>,
    /// `∂θ_T/∂ψ` through the last update, with the step size and the raw
    /// gradient held fixed. Present only when projection was applied.
    pub psi_sensitivity: Option<GradientMap>,
}

fn qa_items<'a>(entries: &'a [SupportEntry], idx: &[usize]) -> Result<Vec<&'a VqaInstance>> {
    idx.iter()
        .map(|&i| match &entries[i].item {
            SupportItem::Qa(q) => Ok(q),
            SupportItem::Caption(_) => Err(Error::Config("qa adaptation given a caption item".into())),
        })
        .collect()
}

fn caption_items<'a>(entries: &'a [SupportEntry], idx: &[usize]) -> Result<Vec<&'a CaptionInstance>> {
    idx.iter()
        .map(|&i| match &entries[i].item {
            SupportItem::Caption(c) => Ok(c),
            SupportItem::Qa(_) => Err(Error::Config("caption adaptation given a QA item".into())),
        })
        .collect()
}

/// Adaptation loss and its gradient at `weights` over the sampled items.
pub fn adaptation_gradient(
    weights: &ModelWeights,
    entries: &[SupportEntry],
    idx: &[usize],
    config: &AdaptationConfig,
) -> Result<(f64, GradientMap)> {
    let graph = match config.support_mode {
        SupportMode::Qa => vqa_loss_graph(weights, &qa_items(entries, idx)?)?,
        SupportMode::Caption => compat_loss_graph(weights, &caption_items(entries, idx)?)?,
    };
    let (mut loss, mut grad) = loss_and_gradients(weights, &graph)?;
    if config.support_mode == SupportMode::Caption {
        grad.retain(|n| !names::is_head(n));
    }
    if config.reduction == Reduction::Sum {
        let n = idx.len() as f64;
        loss *= n;
        grad.scale(n);
    }
    Ok((loss, grad))
}

/// Runs `config.steps` inner updates from a copy of `theta0`.
pub fn adapt<R: Rng + ?Sized>(
    theta0: &ModelWeights,
    support: &RetrievedSupport<'_>,
    config: &AdaptationConfig,
    psi: Option<&ProjectionParams>,
    rng: &mut R,
) -> Result<AdaptedWeights> {
    config.validate()?;
    let mut weights = theta0.clone();
    let mut out = AdaptedWeights {
        weights: theta0.clone(),
        losses: Vec::with_capacity(config.steps),
        samples: Vec::with_capacity(config.steps),
        psi_sensitivity: None,
    };
    if config.steps == 0 {
        return Ok(out);
    }
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let psi = if config.use_projection {
        Some(psi.ok_or_else(|| Error::Config("projection enabled but no ψ given".into()))?)
    } else {
        None
    };
    let mut state = AdaDeltaState::new();
    for step in 0..config.steps {
        let idx = support.sample(rng);
        let (loss, mut d) = adaptation_gradient(&weights, support.entries, &idx, config)?;
        if !loss.is_finite() || !d.all_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(c) = config.clip_norm {
            d.clip_global_norm(c);
        }
        let projected = match psi {
            Some(p) => project_gradients(p, &d)?,
            None => d.clone(),
        };
        let (delta, step_size) = match config.inner_optimizer {
            InnerOptimizer::AdaDelta => {
                let u = adadelta_update(&mut state, &projected, config.adadelta_rho, config.inner_adadelta_eps)?;
                (u.delta, u.step_size)
            }
            InnerOptimizer::FixedStep { alpha } => {
                let mut delta = projected.clone();
                delta.scale(-alpha);
                let mut step_size = GradientMap::new();
                for (n, g) in d.iter() {
                    step_size.insert(n, Tensor::full(g.shape(), alpha));
                }
                (delta, step_size)
            }
        };
        weights.apply(&delta, 1.0)?;
        if psi.is_some() && step + 1 == config.steps {
            let mut sens = GradientMap::new();
            for (name, g) in d.iter() {
                let c = step_size.get(name).expect("step size for every gradient");
                sens.insert(name, g.zip_map(c, |gi, ci| -gi * ci).expect("same shape"));
            }
            out.psi_sensitivity = Some(sens);
        }
        out.losses.push(loss);
        out.samples.push(idx);
    }
    out.weights = weights;
    Ok(out)
}

/// Persistent outer-loop optimizer state for `θ0` and `ψ`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaOptimizer {
    pub theta: AdaDeltaState,
    pub psi: AdaDeltaState,
    pub steps: u64,
}

/// One meta-training instance group: the queries scored by the main loss and
/// the support their adaptation draws from (`None` skips adaptation).
pub struct Episode<'a> {
    pub queries: Vec<&'a VqaInstance>,
    pub support: Option<RetrievedSupport<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepReport {
    /// Main loss at `θ_T`, averaged over all queries of the batch.
    pub meta_loss: f64,
    pub adaptation_losses: Vec<Vec<f64>>,
    /// Norm of the averaged `θ` gradient before clipping.
    pub grad_norm: f64,
}

/// `θ_T` for an episode, or a copy of `θ0` when it carries no support.
pub fn adapt_episode<R: Rng + ?Sized>(
    theta0: &ModelWeights,
    episode: &Episode<'_>,
    config: &AdaptationConfig,
    psi: Option<&ProjectionParams>,
    rng: &mut R,
) -> Result<AdaptedWeights> {
    match &episode.support {
        Some(s) if !s.is_empty() => adapt(theta0, s, config, psi, rng),
        _ => {
            let none = AdaptationConfig {
                steps: 0,
                ..config.clone()
            };
            let empty = RetrievedSupport::new(&[], Vec::new(), 1);
            adapt(theta0, &empty, &none, psi, rng)
        }
    }
}

/// First-order meta-update. Gradients of the main loss are taken at each
/// episode's `θ_T` and applied to `θ0`; `ψ` is differentiated through the last
/// inner update only. Episodes are weighted by their number of queries.
/// The reported meta-loss follows `config.meta_reduction`.
pub fn meta_step<R: Rng + ?Sized>(
    theta0: &mut ModelWeights,
    psi: &mut ProjectionParams,
    batch: &[Episode<'_>],
    config: &AdaptationConfig,
    outer: &mut MetaOptimizer,
    rng: &mut R,
) -> Result<MetaStepReport> {
    let total: usize = batch.iter().map(|e| e.queries.len()).sum();
    if total == 0 {
        return Err(Error::Config("meta_step needs a non-empty batch".into()));
    }
    let mut g_theta = GradientMap::new();
    let mut g_psi = GradientMap::new();
    let mut meta_loss = 0.0;
    let mut adaptation_losses = Vec::with_capacity(batch.len());
    for episode in batch {
        if episode.queries.is_empty() {
            continue;
        }
        let use_psi = config.use_projection.then_some(&*psi);
        let adapted = adapt_episode(theta0, episode, config, use_psi, rng)?;
        let graph = vqa_loss_graph(&adapted.weights, &episode.queries)?;
        let (loss, grad) = loss_and_gradients(&adapted.weights, &graph)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteMetaLoss);
        }
        let w = episode.queries.len() as f64 / total as f64;
        meta_loss += w * loss;
        g_theta.accumulate(&grad, w);
        if let Some(sens) = &adapted.psi_sensitivity {
            let mut gp = GradientMap::new();
            for (name, s) in sens.iter() {
                if let Some(g) = grad.get(name) {
                    gp.insert(name, g.zip_map(s, |a, b| a * b).expect("same shape"));
                }
            }
            g_psi.accumulate(&gp, w);
        }
        adaptation_losses.push(adapted.losses);
    }
    if config.meta_reduction == Reduction::Sum {
        let answers = batch.iter().find_map(|e| e.queries.first()).map_or(1, |q| q.answer_scores.len());
        let k = (total * answers) as f64;
        meta_loss *= k;
        g_theta.scale(k);
        g_psi.scale(k);
    }
    let grad_norm = match config.clip_norm {
        Some(c) => {
            let n = g_theta.clip_global_norm(c);
            g_psi.clip_global_norm(c);
            n
        }
        None => g_theta.global_norm(),
    };
    let dt = adadelta_step(&mut outer.theta, &g_theta, config.adadelta_rho, config.adadelta_eps)?;
    theta0.apply(&dt, 1.0)?;
    if !g_psi.is_empty() {
        let dp = adadelta_step(&mut outer.psi, &g_psi, config.adadelta_rho, config.adadelta_eps)?;
        psi.apply(&dp, 1.0)?;
    }
    outer.steps += 1;
    Ok(MetaStepReport {
        meta_loss,
        adaptation_losses,
        grad_norm,
    })
}

#[cfg(test)]
mod tests;
