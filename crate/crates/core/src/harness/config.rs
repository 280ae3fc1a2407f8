use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationConfig, SupportMode};
use crate::error::{Error, Result};
use crate::model::AttentionMode;
use crate::retrieval::RelevanceConfig;

/// Where adaptation support comes from at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportSource {
    /// Training-split QA pairs.
    Train,
    /// Test-split QA pairs, masked by image id.
    Test,
    Captions,
}

impl SupportSource {
    pub fn name(self) -> &'static str {
        match self {
            SupportSource::Train => "train",
            SupportSource::Test => "test",
            SupportSource::Captions => "captions",
        }
    }
}

impl std::str::FromStr for SupportSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SupportSource::Train),
            "test" => Ok(SupportSource::Test),
            "captions" => Ok(SupportSource::Captions),
            _ => Err(Error::Config(format!("unknown support source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    /// Directory of precomputed relevance matrices.
    pub relevance: PathBuf,
    pub checkpoint: PathBuf,
    /// T=0 checkpoint used for the r2 factor.
    pub baseline: PathBuf,
    /// Directory for metric files.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "data".into(),
            relevance: "runs/relevance".into(),
            checkpoint: "runs/model.ckpt".into(),
            baseline: "runs/baseline.ckpt".into(),
            output: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub attention_mode: AttentionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            word_dim: 32,
            hidden_dim: 32,
            attention_mode: AttentionMode::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub max_meta_steps: usize,
    /// Validation is run every this many meta-steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Fraction of the training split used (queries and support alike).
    pub train_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: 32,
            max_meta_steps: 2_500,
            eval_every: 250,
            patience: 5,
            train_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub batch_size: usize,
    pub support: SupportSource,
    /// Fraction of the support set available to retrieval.
    pub support_fraction: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            batch_size: 32,
            support: SupportSource::Train,
            support_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub paths: PathsConfig,
    pub model: ModelSection,
    pub adaptation: AdaptationConfig,
    pub relevance: RelevanceConfig,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seed: 0,
            paths: PathsConfig::default(),
            model: ModelSection::default(),
            adaptation: AdaptationConfig::default(),
            relevance: RelevanceConfig::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")))
    }
}

impl ExperimentConfig {
    /// Caption-mode counterpart of the default configuration.
    pub fn caption() -> Self {
        let mut cfg = ExperimentConfig {
            name: "caption".into(),
            ..ExperimentConfig::default()
        };
        cfg.adaptation.support_mode = SupportMode::Caption;
        cfg.adaptation.use_projection = true;
        cfg.adaptation.inner_adadelta_eps = 1e-4;
        cfg.evaluation.support = SupportSource::Captions;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.adaptation.validate()?;
        self.relevance.validate()?;
        if self.training.batch_size == 0 || self.evaluation.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.training.eval_every == 0 {
            return Err(Error::Config("training.eval_every must be positive".into()));
        }
        check_fraction("training.train_fraction", self.training.train_fraction)?;
        check_fraction("evaluation.support_fraction", self.evaluation.support_fraction)?;
        let captions = self.adaptation.support_mode == SupportMode::Caption;
        if captions != (self.evaluation.support == SupportSource::Captions) {
            return Err(Error::Config(
                "caption support mode and caption support source go together".into(),
            ));
        }
        Ok(())
    }

    /// Training-time support: the training split itself, or the caption pool.
    pub fn training_support(&self) -> SupportSource {
        match self.adaptation.support_mode {
            SupportMode::Qa => SupportSource::Train,
            SupportMode::Caption => SupportSource::Captions,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `key.path=value` overrides (values in TOML
    /// syntax; bare words are taken as strings).
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
