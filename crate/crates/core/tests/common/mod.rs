#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ramvqa::diffcore::{GradientMap, Tensor};
use ramvqa::model::{CaptionInstance, ModelConfig, ModelWeights, VqaInstance};
use ramvqa::retrieval::{SupportEntry, SupportItem};

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `loss` along one coordinate of one named tensor.
pub fn central_difference(
    weights: &ModelWeights,
    name: &str,
    index: usize,
    h: f64,
    loss: &dyn Fn(&ModelWeights) -> f64,
) -> f64 {
    let mut plus = weights.clone();
    plus.get_mut(name).unwrap().data_mut()[index] += h;
    let mut minus = weights.clone();
    minus.get_mut(name).unwrap().data_mut()[index] -= h;
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over `per_tensor` random coordinates of every named
/// tensor. Tensors missing from `grad` count as zero gradient.
pub fn worst_gradient_error(
    weights: &ModelWeights,
    grad: &GradientMap,
    loss: &dyn Fn(&ModelWeights) -> f64,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, t) in weights.iter() {
        for _ in 0..per_tensor {
            let i = rng.random_range(0..t.len());
            let a = grad.get(name).map_or(0.0, |g| g.data()[i]);
            let n = central_difference(weights, name, i, FD_STEP, loss);
            let e = relative_error(a, n);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {a:.3e} numeric {n:.3e}"));
            }
        }
    }
    worst
}

pub fn small_model(mode: ramvqa::model::AttentionMode) -> ModelConfig {
    ModelConfig {
        word_dim: 8,
        hidden_dim: 7,
        num_regions: 4,
        feature_dim: 6,
        num_answers: 5,
        vocab_size: 8,
        attention_mode: mode,
    }
}

pub fn random_features(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.num_regions * cfg.feature_dim;
    Tensor::matrix(cfg.num_regions, cfg.feature_dim, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_qa(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> VqaInstance {
    let len = rng.random_range(1..=5);
    VqaInstance {
        question: (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
        features: random_features(cfg, rng),
        answer_scores: (0..cfg.num_answers)
            .map(|_| [0.0, 0.3, 0.6, 1.0][rng.random_range(0..4)])
            .collect(),
    }
}

pub fn random_caption(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> CaptionInstance {
    let len = rng.random_range(1..=6);
    CaptionInstance {
        caption: (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
        features: random_features(cfg, rng),
    }
}

pub fn qa_entry(q: VqaInstance, image_id: u64) -> SupportEntry {
    SupportEntry {
        text: q.question.clone(),
        item: SupportItem::Qa(q),
        image_id,
    }
}

pub fn caption_entry(c: CaptionInstance, image_id: u64) -> SupportEntry {
    SupportEntry {
        text: c.caption.clone(),
        item: SupportItem::Caption(c),
        image_id,
    }
}
