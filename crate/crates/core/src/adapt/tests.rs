use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{AttentionMode, ModelConfig};
use crate::retrieval::SupportItem;

fn small_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        word_dim: 6,
        hidden_dim: 5,
        num_regions: 3,
        feature_dim: 4,
        num_answers: 4,
        vocab_size: 9,
        attention_mode: mode,
    }
}

fn random_features(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.num_regions * cfg.feature_dim;
    Tensor::matrix(
        cfg.num_regions,
        cfg.feature_dim,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn qa_entry(cfg: &ModelConfig, rng: &mut ChaCha8Rng, image_id: u64) -> SupportEntry {
    let question: Vec<usize> = (0..3).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let mut scores = vec![0.0; cfg.num_answers];
    scores[rng.random_range(0..cfg.num_answers)] = 1.0;
    SupportEntry {
        text: question.clone(),
        item: SupportItem::Qa(VqaInstance {
            question,
            features: random_features(cfg, rng),
            answer_scores: scores,
        }),
        image_id,
    }
}

fn caption_entry(cfg: &ModelConfig, rng: &mut ChaCha8Rng, image_id: u64) -> SupportEntry {
    let caption: Vec<usize> = (0..4).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    SupportEntry {
        text: caption.clone(),
        item: SupportItem::Caption(CaptionInstance {
            caption,
            features: random_features(cfg, rng),
        }),
        image_id,
    }
}

fn query(entry: &SupportEntry) -> &VqaInstance {
    match &entry.item {
        SupportItem::Qa(q) => q,
        SupportItem::Caption(_) => unreachable!(),
    }
}

fn caption_config() -> AdaptationConfig {
    AdaptationConfig {
        support_mode: SupportMode::Caption,
        use_projection: true,
        ..AdaptationConfig::default()
    }
}

#[test]
fn zero_steps_returns_theta0() {
    let cfg = small_config(AttentionMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..4).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&entries, vec![vec![0, 1, 2, 3]], 2);
    let config = AdaptationConfig {
        steps: 0,
        ..AdaptationConfig::default()
    };
    let out = adapt(&w, &support, &config, None, &mut rng).unwrap();
    assert_eq!(out.weights, w);
    assert!(out.losses.is_empty());
}

#[test]
fn zero_projection_in_caption_mode_is_a_no_op() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..5).map(|i| caption_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&entries, vec![(0..5).collect()], 3);
    let psi = ProjectionParams::zeros(&w);
    let out = adapt(&w, &support, &caption_config(), Some(&psi), &mut rng).unwrap();
    assert_eq!(out.weights, w);
}

#[test]
fn caption_mode_never_touches_head() {
    for mode in [AttentionMode::Full, AttentionMode::Uniform] {
        let cfg = small_config(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let entries: Vec<_> = (0..5).map(|i| caption_entry(&cfg, &mut rng, i)).collect();
        let support = RetrievedSupport::new(&entries, vec![(0..5).collect()], 3);
        let psi = ProjectionParams::ones(&w);
        let out = adapt(&w, &support, &caption_config(), Some(&psi), &mut rng).unwrap();
        let mut changed = 0;
        for (name, t) in w.iter() {
            let after = out.weights.get(name).unwrap();
            if names::is_head(name) {
                assert_eq!(after, t, "{name} changed");
            } else if after != t {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn caption_mode_requires_projection() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..2).map(|i| caption_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&entries, vec![vec![0, 1]], 2);
    let config = AdaptationConfig {
        use_projection: false,
        ..caption_config()
    };
    assert!(adapt(&w, &support, &config, None, &mut rng).is_err());
    let qa: Vec<_> = (0..2).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let mixed = RetrievedSupport::new(&qa, vec![vec![0, 1]], 2);
    let psi = ProjectionParams::ones(&w);
    assert!(adapt(&w, &mixed, &caption_config(), Some(&psi), &mut rng).is_err());
}

#[test]
fn empty_support_is_an_error() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let support = RetrievedSupport::new(&[], vec![vec![]], 2);
    let r = adapt(&w, &support, &AdaptationConfig::default(), None, &mut rng);
    assert!(matches!(r, Err(Error::EmptySupport)));
}

#[test]
fn adapt_is_pure_and_deterministic() {
    let cfg = small_config(AttentionMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..10).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&entries, vec![(0..10).collect()], 4);
    let before = w.checksum();
    let a = adapt(&w, &support, &AdaptationConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = adapt(&w, &support, &AdaptationConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(w.checksum(), before);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.losses, b.losses);
    assert_ne!(a.weights, w);
}

#[test]
fn repeated_instance_loss_does_not_increase() {
    let mut failures = 0;
    for seed in 0..50 {
        let cfg = small_config(AttentionMode::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let one = qa_entry(&cfg, &mut rng, 0);
        let entries = vec![one; 6];
        let support = RetrievedSupport::new(&entries, vec![(0..6).collect()], 3);
        let out = adapt(&w, &support, &AdaptationConfig::default(), None, &mut rng).unwrap();
        let (last, _) = adaptation_gradient(&out.weights, &entries, &[0], &AdaptationConfig::default()).unwrap();
        let mut trace = out.losses.clone();
        trace.push(last);
        if trace.windows(2).any(|p| p[1] > p[0]) {
            failures += 1;
        }
    }
    assert!(failures <= 5, "{failures} seeds increased");
}

#[test]
fn fixed_step_single_update_is_literal() {
    let cfg = small_config(AttentionMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..3).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&entries, vec![vec![0, 1, 2]], 3);
    let alpha = 0.05;
    let config = AdaptationConfig {
        steps: 1,
        clip_norm: None,
        reduction: Reduction::Sum,
        inner_optimizer: InnerOptimizer::FixedStep { alpha },
        ..AdaptationConfig::default()
    };
    let out = adapt(&w, &support, &config, None, &mut rng).unwrap();
    let mut expected = w.clone();
    for e in &entries {
        let g = vqa_loss_graph(&w, &[query(e)]).unwrap();
        let (_, grad) = loss_and_gradients(&w, &g).unwrap();
        expected.apply(&grad, -alpha).unwrap();
    }
    for (name, t) in expected.iter() {
        assert!(t.max_abs_diff(out.weights.get(name).unwrap()) <= 1e-10, "{name}");
    }
}

#[test]
fn sampled_subsets_vary_across_iterations() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..12).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&entries, vec![(0..12).collect()], 4);
    let config = AdaptationConfig {
        steps: 1,
        ..AdaptationConfig::default()
    };
    let mut seen = HashSet::new();
    for _ in 0..10 {
        let out = adapt(&w, &support, &config, None, &mut rng).unwrap();
        let mut s = out.samples[0].clone();
        s.sort();
        seen.insert(s);
    }
    assert!(seen.len() > 1);
}

#[test]
fn meta_step_without_adaptation_is_supervised_training() {
    let cfg = small_config(AttentionMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..4).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let queries: Vec<&VqaInstance> = entries.iter().map(query).collect();
    let config = AdaptationConfig {
        steps: 0,
        meta_reduction: Reduction::Mean,
        ..AdaptationConfig::default()
    };

    let mut theta = w.clone();
    let mut psi = ProjectionParams::ones(&w);
    let mut outer = MetaOptimizer::default();
    let batch = [Episode {
        queries: queries.clone(),
        support: Some(RetrievedSupport::new(&entries, vec![vec![0, 1]], 1)),
    }];
    let report = meta_step(&mut theta, &mut psi, &batch, &config, &mut outer, &mut rng).unwrap();

    let g = vqa_loss_graph(&w, &queries).unwrap();
    let (loss, mut grad) = loss_and_gradients(&w, &g).unwrap();
    grad.clip_global_norm(10.0);
    let mut state = AdaDeltaState::new();
    let delta = adadelta_step(&mut state, &grad, 0.95, config.adadelta_eps).unwrap();
    let mut expected = w.clone();
    expected.apply(&delta, 1.0).unwrap();

    assert_eq!(report.meta_loss, loss);
    assert_eq!(theta, expected);
    assert_eq!(psi, ProjectionParams::ones(&w));
}

#[test]
fn summed_meta_loss_scales_by_queries_and_answers() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..4).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let queries: Vec<&VqaInstance> = entries.iter().map(query).collect();
    let config = AdaptationConfig {
        steps: 0,
        clip_norm: None,
        ..AdaptationConfig::default()
    };
    let batch = [Episode {
        queries: queries.clone(),
        support: None,
    }];
    let mut theta = w.clone();
    let mut psi = ProjectionParams::ones(&w);
    let report = meta_step(&mut theta, &mut psi, &batch, &config, &mut MetaOptimizer::default(), &mut rng).unwrap();

    let k = (queries.len() * cfg.num_answers) as f64;
    let g = vqa_loss_graph(&w, &queries).unwrap();
    let (loss, mut grad) = loss_and_gradients(&w, &g).unwrap();
    grad.scale(k);
    let delta = adadelta_step(&mut AdaDeltaState::new(), &grad, 0.95, config.adadelta_eps).unwrap();
    let mut expected = w.clone();
    expected.apply(&delta, 1.0).unwrap();
    assert!((report.meta_loss - k * loss).abs() < 1e-9 * k * loss);
    for (name, t) in expected.iter() {
        assert!(t.max_abs_diff(theta.get(name).unwrap()) < 1e-15, "{name}");
    }
}

#[test]
fn identical_batch_members_average_to_one() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..3).map(|i| qa_entry(&cfg, &mut rng, i)).collect();
    let q = query(&entries[0]);
    let config = AdaptationConfig {
        meta_reduction: Reduction::Mean,
        ..AdaptationConfig::default()
    };
    let episode = || Episode {
        queries: vec![q],
        support: Some(RetrievedSupport::new(&entries, vec![vec![1, 2]], 2)),
    };

    let run = |batch: Vec<Episode<'_>>| {
        let mut theta = w.clone();
        let mut psi = ProjectionParams::ones(&w);
        let mut outer = MetaOptimizer::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        meta_step(&mut theta, &mut psi, &batch, &config, &mut outer, &mut r).unwrap();
        theta
    };
    let single = run(vec![episode()]);
    let triple = run(vec![episode(), episode(), episode()]);
    for (name, t) in single.iter() {
        assert!(t.max_abs_diff(triple.get(name).unwrap()) < 1e-15, "{name}");
    }
}

#[test]
fn projection_receives_gradient_through_last_step() {
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let captions: Vec<_> = (0..4).map(|i| caption_entry(&cfg, &mut rng, i)).collect();
    let qa = qa_entry(&cfg, &mut rng, 99);
    let mut theta = w.clone();
    let mut psi = ProjectionParams::ones(&w);
    let mut outer = MetaOptimizer::default();
    let batch = [Episode {
        queries: vec![query(&qa)],
        support: Some(RetrievedSupport::new(&captions, vec![(0..4).collect()], 4)),
    }];
    meta_step(&mut theta, &mut psi, &batch, &caption_config(), &mut outer, &mut rng).unwrap();
    let ones = ProjectionParams::ones(&w);
    let mut moved = 0;
    for (name, p) in psi.iter() {
        if names::is_head(name) {
            assert_eq!(p, ones.get(name).unwrap(), "{name}");
        } else if p != ones.get(name).unwrap() {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn psi_sensitivity_matches_finite_difference() {
    // Perturbing ψ only in the final update must move θ_T by the recorded sensitivity.
    let cfg = small_config(AttentionMode::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let captions: Vec<_> = (0..3).map(|i| caption_entry(&cfg, &mut rng, i)).collect();
    let support = RetrievedSupport::new(&captions, vec![(0..3).collect()], 3);
    let alpha = 0.1;
    let config = AdaptationConfig {
        steps: 1,
        inner_optimizer: InnerOptimizer::FixedStep { alpha },
        clip_norm: None,
        ..caption_config()
    };
    let psi = ProjectionParams::ones(&w);
    let base = adapt(&w, &support, &config, Some(&psi), &mut rng).unwrap();
    let sens = base.psi_sensitivity.as_ref().unwrap();
    let name = "question.w1";
    let h = 1e-3;
    let mut bumped = psi.clone();
    bumped.get_mut(name).unwrap().data_mut()[0] += h;
    let moved = adapt(&w, &support, &config, Some(&bumped), &mut rng).unwrap();
    let fd = (moved.weights.get(name).unwrap().data()[0] - base.weights.get(name).unwrap().data()[0]) / h;
    assert!((fd - sens.get(name).unwrap().data()[0]).abs() < 1e-9);
}
