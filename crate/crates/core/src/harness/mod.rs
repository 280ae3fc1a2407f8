//! Experiment orchestration: configuration, meta-training with early
//! stopping, transductive evaluation, leave-one-out support, sweeps and
//! reports.

mod config;
mod metrics;
mod report;
mod run;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::retrieval::{RelevanceConfig, RelevanceMatrix, RelevanceSidecar, SupportSet};
use crate::seed;
use crate::synthdata::{Split, SyntheticDataset};

pub use config::{
    apply_override, EvaluationSection, ExperimentConfig, ModelSection, PathsConfig, SupportSource, TrainingSection,
};
pub use metrics::{CategoryMetrics, Metrics};
pub use report::{read_csv, read_metrics_file, render_table, to_csv, write_metrics_file, MetricsRow};
pub use run::{
    checkpoint_metadata, evaluate, model_config, relevance_matrix, support_set, train, training_subset, EvalPoint,
    Mask, ModelState, Retriever, TrainInputs, TrainReport,
};

fn factor_label(cfg: &RelevanceConfig) -> String {
    cfg.factors.iter().map(|f| f.to_string()).collect()
}

/// File name of the matrix scoring `queries` against `source` under `cfg`'s factors.
pub fn matrix_file_name(queries: Split, source: SupportSource, cfg: &RelevanceConfig) -> String {
    format!("{}-{}-{}.relm", queries.name(), source.name(), factor_label(cfg))
}

/// A dataset with lazily built support sets and relevance matrices. Matrices
/// are read from `relevance_dir` when present there, and computed (with the
/// baseline weights for r2) otherwise.
pub struct Workspace<'a> {
    pub dataset: &'a SyntheticDataset,
    pub baseline: Option<ModelWeights>,
    /// SHA-256 of the baseline checkpoint file, recorded next to written matrices.
    pub baseline_sha256: Option<String>,
    pub relevance_dir: Option<PathBuf>,
    supports: HashMap<SupportSource, SupportSet>,
    matrices: HashMap<String, RelevanceMatrix>,
}

impl<'a> Workspace<'a> {
    pub fn new(dataset: &'a SyntheticDataset) -> Self {
        Workspace {
            dataset,
            baseline: None,
            baseline_sha256: None,
            relevance_dir: None,
            supports: HashMap::new(),
            matrices: HashMap::new(),
        }
    }

    pub fn with_baseline(mut self, baseline: ModelWeights) -> Self {
        self.baseline = Some(baseline);
        self
    }

    pub fn support(&mut self, source: SupportSource) -> Result<&SupportSet> {
        if !self.supports.contains_key(&source) {
            let s = support_set(self.dataset, source)?;
            if s.is_empty() {
                return Err(Error::Config(format!("support source `{}` is empty", source.name())));
            }
            self.supports.insert(source, s);
        }
        Ok(&self.supports[&source])
    }

    /// Builds (or loads) the matrix and keeps it cached.
    pub fn prepare(&mut self, queries: Split, source: SupportSource, cfg: &RelevanceConfig) -> Result<()> {
        let key = matrix_file_name(queries, source, cfg);
        if self.matrices.contains_key(&key) {
            return Ok(());
        }
        if let Some(dir) = &self.relevance_dir {
            let path = dir.join(&key);
            if path.exists() {
                let (m, sidecar) = RelevanceMatrix::read(&path)?;
                if sidecar.factors != cfg.factors {
                    return Err(Error::format(&path, "factors differ from the configuration"));
                }
                let rows = self.dataset.split(queries).len();
                let cols = self.support(source)?.len();
                if m.queries() != rows || m.support() != cols {
                    return Err(Error::format(&path, "matrix shape does not match the dataset"));
                }
                self.matrices.insert(key, m);
                return Ok(());
            }
        }
        self.support(source)?;
        let m = relevance_matrix(
            self.dataset,
            self.dataset.split(queries),
            &self.supports[&source],
            cfg,
            self.baseline.as_ref(),
        )?;
        self.matrices.insert(key, m);
        Ok(())
    }

    /// Writes a prepared matrix and its sidecar into `dir`.
    pub fn write_matrix(&self, dir: &Path, queries: Split, source: SupportSource, cfg: &RelevanceConfig) -> Result<PathBuf> {
        let key = matrix_file_name(queries, source, cfg);
        let m = self
            .matrices
            .get(&key)
            .ok_or_else(|| Error::Config(format!("matrix `{key}` was not prepared")))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(&key);
        m.write(
            &path,
            &RelevanceSidecar {
                factors: cfg.factors.clone(),
                baseline_checkpoint_sha256: self.baseline_sha256.clone(),
            },
        )?;
        Ok(path)
    }

    /// Retriever over a prepared matrix.
    pub fn retriever<'s>(&'s self, queries: Split, source: SupportSource, cfg: &'s RelevanceConfig) -> Result<Retriever<'s>> {
        let key = matrix_file_name(queries, source, cfg);
        let matrix = self
            .matrices
            .get(&key)
            .ok_or_else(|| Error::Config(format!("matrix `{key}` was not prepared")))?;
        let support = self
            .supports
            .get(&source)
            .ok_or_else(|| Error::Config(format!("support `{}` was not prepared", source.name())))?;
        let mask = match source {
            SupportSource::Train if queries == Split::Train => Mask::Items,
            SupportSource::Train => Mask::Nothing,
            _ => Mask::Images,
        };
        Ok(Retriever::new(support, matrix, cfg).with_mask(mask))
    }
}

/// SHA-256 (hex) of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Trains per `cfg` on the workspace dataset: T=0 runs skip retrieval,
/// otherwise training-time support is the training split (qa) or the caption
/// pool. A batch never retrieves its own QA pairs, nor captions of its own images.
pub fn run_training(cfg: &ExperimentConfig, ws: &mut Workspace<'_>, checkpoint: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let ds = ws.dataset;
    let subset = training_subset(&ds.train, cfg.training.train_fraction, cfg.seed);
    let init = ModelState::init(&model_config(cfg, ds), cfg.seed)?;
    let source = cfg.training_support();
    let adaptive = cfg.adaptation.steps > 0;
    if adaptive {
        ws.prepare(Split::Train, source, &cfg.relevance)?;
        ws.prepare(Split::Val, source, &cfg.relevance)?;
    }
    let (train_retriever, val_retriever) = if adaptive {
        let mut tr = ws.retriever(Split::Train, source, &cfg.relevance)?;
        if source == SupportSource::Train && subset.len() < ds.train.len() {
            let mut available = vec![false; ds.train.len()];
            for &i in &subset {
                available[i] = true;
            }
            tr.available = Some(available.clone());
            let mut vr = ws.retriever(Split::Val, source, &cfg.relevance)?;
            vr.available = Some(available);
            (Some(tr), Some(vr))
        } else {
            (Some(tr), Some(ws.retriever(Split::Val, source, &cfg.relevance)?))
        }
    } else {
        (None, None)
    };
    let inputs = TrainInputs {
        train: &ds.train,
        subset,
        val: &ds.val,
        train_retriever,
        val_retriever,
    };
    train(cfg, &inputs, init, checkpoint)
}

/// Evaluates `state` on `split` with support from `cfg.evaluation.support`
/// (subsampled to `cfg.evaluation.support_fraction`).
pub fn run_evaluation(cfg: &ExperimentConfig, ws: &mut Workspace<'_>, state: &ModelState, split: Split) -> Result<Metrics> {
    evaluate_with(cfg, ws, state, split, cfg.evaluation.support, &cfg.adaptation)
}

fn evaluate_with(
    cfg: &ExperimentConfig,
    ws: &mut Workspace<'_>,
    state: &ModelState,
    split: Split,
    source: SupportSource,
    adaptation: &AdaptationConfig,
) -> Result<Metrics> {
    let examples = &ws.dataset.split(split).to_vec();
    let eval_seed = seed::derive(cfg.seed, "eval", split as u64);
    if adaptation.steps == 0 {
        return evaluate(state, examples, None, adaptation, cfg.evaluation.batch_size, eval_seed);
    }
    ws.prepare(split, source, &cfg.relevance)?;
    let r = ws
        .retriever(split, source, &cfg.relevance)?
        .with_fraction(cfg.evaluation.support_fraction, cfg.seed);
    evaluate(state, examples, Some(&r), adaptation, cfg.evaluation.batch_size, eval_seed)
}

/// Test split with the test split itself as support; every image of the batch
/// is masked out of retrieval.
pub fn leave_one_out_eval(cfg: &ExperimentConfig, ws: &mut Workspace<'_>, state: &ModelState) -> Result<Metrics> {
    if cfg.adaptation.support_mode != crate::adapt::SupportMode::Qa {
        return Err(Error::Config("leave-one-out evaluation needs qa support mode".into()));
    }
    evaluate_with(cfg, ws, state, Split::Test, SupportSource::Test, &cfg.adaptation)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainFraction,
    SupportFraction,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_fraction" | "train-fraction" => Ok(SweepAxis::TrainFraction),
            "support_fraction" | "support-fraction" => Ok(SweepAxis::SupportFraction),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    pub metrics: Metrics,
}

/// Test metrics at every fraction. `TrainFraction` retrains from scratch at
/// each point; `SupportFraction` re-evaluates `state` (required for it).
pub fn sweep(
    cfg: &ExperimentConfig,
    ws: &mut Workspace<'_>,
    axis: SweepAxis,
    points: &[f64],
    state: Option<&ModelState>,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(points.len());
    for &fraction in points {
        let mut c = cfg.clone();
        let metrics = match axis {
            SweepAxis::TrainFraction => {
                c.training.train_fraction = fraction;
                c.validate()?;
                let report = run_training(&c, ws, None)?;
                run_evaluation(&c, ws, &report.best, Split::Test)?
            }
            SweepAxis::SupportFraction => {
                c.evaluation.support_fraction = fraction;
                c.validate()?;
                let s = state.ok_or_else(|| Error::Config("support sweep needs a trained state".into()))?;
                run_evaluation(&c, ws, s, Split::Test)?
            }
        };
        out.push(SweepPoint { fraction, metrics });
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
