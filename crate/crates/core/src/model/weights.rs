use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{GradientMap, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Question-guided softmax attention over regions.
    Full,
    /// Regions are mean-pooled; no attention weights exist.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub num_regions: usize,
    pub feature_dim: usize,
    pub num_answers: usize,
    pub vocab_size: usize,
    pub attention_mode: AttentionMode,
}

impl ModelConfig {
    /// Desk-scale dimensions for the given vocabulary and answer set sizes.
    pub fn desk(vocab_size: usize, num_answers: usize) -> Self {
        ModelConfig {
            word_dim: 32,
            hidden_dim: 32,
            num_regions: 6,
            feature_dim: 24,
            num_answers,
            vocab_size,
            attention_mode: AttentionMode::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_regions", self.num_regions),
            ("feature_dim", self.feature_dim),
            ("num_answers", self.num_answers),
            ("vocab_size", self.vocab_size),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Every parameter as `(name, shape, fan_in)`, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (w, h, f, a) = (self.word_dim, self.hidden_dim, self.feature_dim, self.num_answers);
        let mut specs = vec![(names::EMBEDDINGS.to_string(), vec![self.vocab_size, w], 0)];
        let mut gated = |prefix: &str, input: usize| {
            for (part, shape) in [
                ("w1", vec![input, h]),
                ("b1", vec![h]),
                ("w2", vec![input, h]),
                ("b2", vec![h]),
            ] {
                specs.push((format!("{prefix}.{part}"), shape, input));
            }
        };
        gated(names::QUESTION, w);
        if self.attention_mode == AttentionMode::Full {
            gated(names::ATT_GATE, h);
        }
        gated(names::VISUAL, f);
        gated(names::OUTPUT, h);
        if self.attention_mode == AttentionMode::Full {
            specs.extend([
                (format!("{}.w", names::ATT_QUESTION), vec![w, h], w),
                (format!("{}.b", names::ATT_QUESTION), vec![h], w),
                (format!("{}.w", names::ATT_REGION), vec![f, h], f),
                (format!("{}.b", names::ATT_REGION), vec![h], f),
                (format!("{}.w", names::ATT_SCORE), vec![h, 1], h),
                (format!("{}.b", names::ATT_SCORE), vec![1], h),
            ]);
        }
        specs.push((format!("{}.w", names::CLASSIFIER), vec![h, a], h));
        specs.push((format!("{}.b", names::CLASSIFIER), vec![a], h));
        specs
    }
}

/// Parameter name prefixes.
pub mod names {
    pub const EMBEDDINGS: &str = "word_embeddings";
    pub const QUESTION: &str = "question";
    pub const ATT_QUESTION: &str = "attention.question";
    pub const ATT_REGION: &str = "attention.region";
    pub const ATT_GATE: &str = "attention.gate";
    pub const ATT_SCORE: &str = "attention.score";
    pub const VISUAL: &str = "visual";
    pub const OUTPUT: &str = "output";
    pub const CLASSIFIER: &str = "classifier";

    /// Tensors that only the answer-scoring head uses; they never receive
    /// gradient from the caption compatibility loss.
    pub fn is_head(name: &str) -> bool {
        name.starts_with("output.") || name.starts_with("classifier.")
    }
}

/// Every named parameter tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for affine maps, `[-0.1, 0.1]` for embeddings.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in config.param_specs() {
            let bound = if fan_in == 0 {
                0.1
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelWeights {
            config: config.clone(),
            tensors,
        })
    }

    pub fn filled(config: &ModelConfig, value: f64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::full(&shape, value)))
            .collect();
        Ok(ModelWeights {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::filled(config, 0.0)
    }

    /// Assembles weights from named tensors, checking names and shapes against the config.
    pub fn from_tensors(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape, _) in config.param_specs() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::UnknownParam(extra.clone()));
        }
        Ok(ModelWeights {
            config: config.clone(),
            tensors: out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// `self += scale * delta` for every tensor present in `delta`.
    pub fn apply(&mut self, delta: &GradientMap, scale: f64) -> Result<()> {
        for (name, d) in delta.iter() {
            let t = self.get_mut(name)?;
            if t.shape() != d.shape() {
                return Err(Error::Config(format!("delta for `{name}` has wrong shape")));
            }
            t.add_assign_scaled(d, scale);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
