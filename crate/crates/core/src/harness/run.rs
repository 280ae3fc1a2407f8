use std::collections::HashSet;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;

use super::config::{ExperimentConfig, SupportSource};
use super::metrics::Metrics;
use crate::adapt::{
    adapt_episode, meta_step, AdaptationConfig, Episode, MetaOptimizer, ProjectionParams,
    RetrievedSupport,
};
use crate::diffcore::bce_loss;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{forward_vqa_batch, predict_answer, ModelConfig, ModelWeights, VqaInstance};
use crate::retrieval::{
    precompute_matrix, top_k, RelevanceConfig, RelevanceContext, RelevanceMatrix, SupportEntry, SupportItem,
    SupportSet,
};
use crate::seed;
use crate::synthdata::{Example, SyntheticDataset};

pub fn model_config(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> ModelConfig {
    ModelConfig {
        word_dim: cfg.model.word_dim,
        hidden_dim: cfg.model.hidden_dim,
        num_regions: ds.world.num_regions,
        feature_dim: ds.world.feature_dim,
        num_answers: ds.answers.len(),
        vocab_size: ds.vocab.len(),
        attention_mode: cfg.model.attention_mode,
    }
}

fn qa_entry(ds: &SyntheticDataset, e: &Example) -> Result<SupportEntry> {
    let mut text = e.instance.question.clone();
    text.extend(ds.vocab.encode(&ds.answers[e.answer])?);
    Ok(SupportEntry {
        item: SupportItem::Qa(e.instance.clone()),
        image_id: e.image_id,
        text,
    })
}

/// Retrievable items of a source. QA items carry their question plus answer words as text.
pub fn support_set(ds: &SyntheticDataset, source: SupportSource) -> Result<SupportSet> {
    let entries = match source {
        SupportSource::Train => ds.train.iter().map(|e| qa_entry(ds, e)).collect::<Result<_>>()?,
        SupportSource::Test => ds.test.iter().map(|e| qa_entry(ds, e)).collect::<Result<_>>()?,
        SupportSource::Captions => ds
            .captions
            .iter()
            .map(|c| SupportEntry {
                item: SupportItem::Caption(c.instance.clone()),
                image_id: c.image_id,
                text: c.instance.caption.clone(),
            })
            .collect(),
    };
    Ok(SupportSet { entries })
}

/// Relevance of every example of `queries` to every item of `support`.
pub fn relevance_matrix(
    ds: &SyntheticDataset,
    queries: &[Example],
    support: &SupportSet,
    config: &RelevanceConfig,
    baseline: Option<&ModelWeights>,
) -> Result<RelevanceMatrix> {
    let answer_tokens: Vec<Vec<usize>> = ds
        .answers
        .iter()
        .map(|a| ds.vocab.encode(a))
        .collect::<Result<_>>()?;
    let instances: Vec<VqaInstance> = queries.iter().map(|e| e.instance.clone()).collect();
    precompute_matrix(
        &instances,
        support,
        config,
        &RelevanceContext {
            baseline,
            answer_tokens: &answer_tokens,
        },
    )
}

/// A support set, its relevance rows for one query list, and the retrieval settings.
/// What a batch hides from its own retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Nothing,
    /// The batch's own rows, for queries drawn from the support set itself.
    Items,
    /// Every item sharing an image with the batch.
    Images,
}

pub struct Retriever<'a> {
    pub support: &'a SupportSet,
    pub matrix: &'a RelevanceMatrix,
    pub config: &'a RelevanceConfig,
    /// Items available at all (support subsampling); `None` keeps everything.
    pub available: Option<Vec<bool>>,
    pub mask: Mask,
}

impl<'a> Retriever<'a> {
    pub fn new(support: &'a SupportSet, matrix: &'a RelevanceMatrix, config: &'a RelevanceConfig) -> Self {
        Retriever {
            support,
            matrix,
            config,
            available: None,
            mask: Mask::Images,
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = mask;
        self
    }

    /// Keeps a `fraction` of the support items, chosen with `seed`.
    pub fn with_fraction(mut self, fraction: f64, seed: u64) -> Self {
        if fraction < 1.0 {
            let n = self.support.len();
            let keep = ((n as f64 * fraction).round() as usize).max(1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut seed::stream(seed, "support-fraction", 0));
            let mut available = vec![false; n];
            for &i in &idx[..keep] {
                available[i] = true;
            }
            self.available = Some(available);
        } else {
            self.available = None;
        }
        self
    }

    /// Top-K pools for the given matrix rows of one batch whose image ids are
    /// `images`. Returns the pools and how many came back empty.
    pub fn pools(&self, rows: &[usize], images: &HashSet<u64>) -> Result<(Vec<Vec<usize>>, usize)> {
        let none = HashSet::new();
        let mut allowed = self
            .support
            .allowed(self.available.as_deref(), if self.mask == Mask::Images { images } else { &none });
        if self.mask == Mask::Items {
            for &r in rows {
                allowed[r] = false;
            }
        }
        let mut pools = Vec::with_capacity(rows.len());
        let mut skipped = 0;
        for &r in rows {
            match top_k(r, self.matrix, self.config.k, Some(&allowed)) {
                Ok(p) => pools.push(p),
                Err(Error::EmptySupport) => {
                    skipped += 1;
                    pools.push(Vec::new());
                }
                Err(e) => return Err(e),
            }
        }
        Ok((pools, skipped))
    }
}

/// Everything a training run produces and resumes from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub theta: ModelWeights,
    pub psi: ProjectionParams,
    pub optimizer: MetaOptimizer,
}

impl ModelState {
    pub fn init(config: &ModelConfig, seed_value: u64) -> Result<Self> {
        let theta = ModelWeights::init(config, &mut seed::stream(seed_value, "init", 0))?;
        let psi = ProjectionParams::ones(&theta);
        Ok(ModelState {
            theta,
            psi,
            optimizer: MetaOptimizer::default(),
        })
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Map<String, serde_json::Value>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.metadata = metadata.into_iter().collect();
        ck.metadata
            .insert("model_config".into(), serde_json::to_value(self.theta.config())?);
        ck.metadata
            .insert("meta_steps".into(), serde_json::Value::from(self.optimizer.steps));
        ck.insert_prefixed("theta", self.theta.iter());
        ck.insert_prefixed("psi", self.psi.iter());
        for (label, state) in [("theta", &self.optimizer.theta), ("psi", &self.optimizer.psi)] {
            for (name, g, d) in state.iter() {
                ck.tensors.insert(format!("opt/{label}/sq_grad/{name}"), g.clone());
                ck.tensors.insert(format!("opt/{label}/sq_delta/{name}"), d.clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.metadata
                .get("model_config")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint lacks model_config".into()))?,
        )?;
        let theta = ModelWeights::from_tensors(&config, ck.take_prefixed("theta"))?;
        let psi = ProjectionParams::from_tensors(&theta, ck.take_prefixed("psi"))?;
        let mut optimizer = MetaOptimizer {
            steps: ck.metadata.get("meta_steps").and_then(|v| v.as_u64()).unwrap_or(0),
            ..MetaOptimizer::default()
        };
        for (label, state) in [("theta", &mut optimizer.theta), ("psi", &mut optimizer.psi)] {
            let grads = ck.take_prefixed(&format!("opt/{label}/sq_grad"));
            let deltas = ck.take_prefixed(&format!("opt/{label}/sq_delta"));
            for (name, g) in grads {
                let d = deltas
                    .get(&name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("optimizer state for `{name}` incomplete")))?;
                state.insert(&name, g, d)?;
            }
        }
        Ok(ModelState { theta, psi, optimizer })
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_checkpoint(metadata)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

fn accuracy_of(scores: &[f64], truth: &[f64]) -> f64 {
    truth[predict_answer(scores)]
}

/// Transductive evaluation: each batch retrieves support for all its queries
/// (under the retriever's [`Mask`]), adapts once, and is scored with the
/// adapted weights. Accuracy of an instance is its ground-truth score of the
/// predicted answer.
pub fn evaluate(
    state: &ModelState,
    examples: &[Example],
    retriever: Option<&Retriever<'_>>,
    adaptation: &AdaptationConfig,
    batch_size: usize,
    seed_value: u64,
) -> Result<Metrics> {
    let mut metrics = Metrics::default();
    let mut loss_sum = 0.0;
    let mut trace_sum = vec![0.0; adaptation.steps];
    let mut trace_batches = 0usize;
    for (b, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
        let start = b * batch_size;
        let queries: Vec<&VqaInstance> = chunk.iter().map(|e| &e.instance).collect();
        let episode = match (retriever, adaptation.steps) {
            (Some(r), t) if t > 0 => {
                let rows: Vec<usize> = (start..start + chunk.len()).collect();
                let excluded: HashSet<u64> = chunk.iter().map(|e| e.image_id).collect();
                let (pools, skipped) = r.pools(&rows, &excluded)?;
                metrics.skipped += skipped;
                if skipped > 0 {
                    warn!("batch {b}: {skipped} queries without support, adapting only on the rest");
                }
                Episode {
                    queries: queries.clone(),
                    support: Some(RetrievedSupport::new(&r.support.entries, pools, r.config.k_prime)),
                }
            }
            _ => Episode {
                queries: queries.clone(),
                support: None,
            },
        };
        let mut rng = seed::stream(seed_value, "eval-adaptation", b as u64);
        let psi = adaptation.use_projection.then_some(&state.psi);
        let adapted = adapt_episode(&state.theta, &episode, adaptation, psi, &mut rng)?;
        if !adapted.losses.is_empty() {
            for (s, l) in trace_sum.iter_mut().zip(&adapted.losses) {
                *s += l;
            }
            trace_batches += 1;
        }
        let scores = forward_vqa_batch(&adapted.weights, &queries)?;
        for (i, e) in chunk.iter().enumerate() {
            let row = scores.row(i);
            loss_sum += bce_loss(&e.instance.answer_scores, row)?;
            metrics.record(e.category, accuracy_of(row, &e.instance.answer_scores));
        }
    }
    metrics.mean_loss = loss_sum / examples.len().max(1) as f64;
    if trace_batches > 0 {
        metrics.adaptation_trace = trace_sum.iter().map(|s| s / trace_batches as f64).collect();
    }
    Ok(metrics)
}

/// One validation point of a training run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Mean meta-loss over the meta-steps since the previous point.
    pub train_meta_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// State with the best validation accuracy (the first such on ties).
    pub best: ModelState,
    pub best_val_accuracy: f64,
    pub history: Vec<EvalPoint>,
    pub meta_loss_curve: Vec<(u64, f64)>,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Subset of training examples used for a `train_fraction`.
pub fn training_subset(examples: &[Example], fraction: f64, seed_value: u64) -> Vec<usize> {
    let n = examples.len();
    if fraction >= 1.0 {
        return (0..n).collect();
    }
    let keep = ((n as f64 * fraction).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed_value, "train-fraction", 0));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Training inputs: the training queries (indices into the training split,
/// which are also their relevance rows) and the optional support retrievers.
pub struct TrainInputs<'a> {
    pub train: &'a [Example],
    pub subset: Vec<usize>,
    pub val: &'a [Example],
    pub train_retriever: Option<Retriever<'a>>,
    pub val_retriever: Option<Retriever<'a>>,
}

/// Meta-training with early stopping on validation accuracy. When
/// `checkpoint` is given, the best state so far is written there at every
/// improvement, so a failed run leaves its last good state on disk.
pub fn train(cfg: &ExperimentConfig, inputs: &TrainInputs<'_>, init: ModelState, checkpoint: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let t = &cfg.training;
    let adaptation = &cfg.adaptation;
    let mut state = init;
    let mut best = state.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut history = Vec::new();
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    let mut order = inputs.subset.clone();
    let mut shuffle_rng = seed::stream(cfg.seed, "shuffle", 0);
    let mut adapt_rng = seed::stream(cfg.seed, "adaptation", 0);
    let mut stopped_early = false;
    let mut step = 0u64;
    let use_support = adaptation.steps > 0;
    if use_support && inputs.train_retriever.is_none() {
        return Err(Error::Config("adaptive training needs a training-time retriever".into()));
    }

    'outer: while (step as usize) < t.max_meta_steps {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(t.batch_size) {
            if chunk.len() < t.batch_size && order.len() >= t.batch_size {
                continue;
            }
            let queries: Vec<&VqaInstance> = chunk.iter().map(|&i| &inputs.train[i].instance).collect();
            let episode = match (&inputs.train_retriever, use_support) {
                (Some(r), true) => {
                    let images: HashSet<u64> = chunk.iter().map(|&i| inputs.train[i].image_id).collect();
                    let (pools, _) = r.pools(chunk, &images)?;
                    Episode {
                        queries,
                        support: Some(RetrievedSupport::new(&r.support.entries, pools, r.config.k_prime)),
                    }
                }
                _ => Episode { queries, support: None },
            };
            let report = match meta_step(&mut state.theta, &mut state.psi, std::slice::from_ref(&episode), adaptation, &mut state.optimizer, &mut adapt_rng) {
                Ok(r) => r,
                Err(e) => {
                    warn!("meta-step {step} failed: {e}; keeping the last good checkpoint");
                    return Err(e);
                }
            };
            step += 1;
            curve.push((step, report.meta_loss));
            window.0 += report.meta_loss;
            window.1 += 1;

            if step % t.eval_every as u64 == 0 || step as usize >= t.max_meta_steps {
                let m = evaluate(
                    &state,
                    inputs.val,
                    inputs.val_retriever.as_ref(),
                    adaptation,
                    cfg.evaluation.batch_size,
                    seed::derive(cfg.seed, "val", 0),
                )?;
                let point = EvalPoint {
                    step,
                    val_accuracy: m.accuracy(),
                    val_loss: m.mean_loss,
                    train_meta_loss: window.0 / window.1.max(1) as f64,
                };
                info!(
                    "step {step}: meta-loss {:.4}, val accuracy {:.4}, val loss {:.4}",
                    point.train_meta_loss, point.val_accuracy, point.val_loss
                );
                window = (0.0, 0);
                history.push(point.clone());
                if point.val_accuracy > best_acc {
                    best_acc = point.val_accuracy;
                    best = state.clone();
                    since_best = 0;
                    if let Some(p) = checkpoint {
                        best.save(p, checkpoint_metadata(cfg, step, best_acc)?)?;
                    }
                } else {
                    since_best += 1;
                    if since_best >= t.patience {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
            if step as usize >= t.max_meta_steps {
                break 'outer;
            }
        }
    }
    Ok(TrainReport {
        best,
        best_val_accuracy: best_acc,
        history,
        meta_loss_curve: curve,
        steps: step,
        stopped_early,
    })
}

pub fn checkpoint_metadata(
    cfg: &ExperimentConfig,
    step: u64,
    val_accuracy: f64,
) -> Result<serde_json::Map<String, serde_json::Value>> {
    let mut m = serde_json::Map::new();
    m.insert("name".into(), cfg.name.clone().into());
    m.insert("seed".into(), cfg.seed.into());
    m.insert("best_step".into(), step.into());
    m.insert("val_accuracy".into(), val_accuracy.into());
    m.insert("experiment".into(), serde_json::to_value(cfg)?);
    Ok(m)
}
