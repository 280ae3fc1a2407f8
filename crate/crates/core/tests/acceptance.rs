//! Acceptance suite: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. The empirical criteria share one set of trained models per
//! seed, so everything runs inside a single test.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ramvqa::adapt::{
    adapt, adaptation_gradient, adadelta_step, AdaDeltaState, AdaptationConfig, InnerOptimizer, ProjectionParams,
    Reduction, RetrievedSupport, SupportMode,
};
use ramvqa::diffcore::Tensor;
use ramvqa::harness::{
    leave_one_out_eval, run_evaluation, run_training, spearman, support_set, sweep, training_subset, ExperimentConfig,
    Metrics, ModelState, SupportSource, SweepAxis, Workspace,
};
use ramvqa::model::{loss_and_gradients, names, vqa_loss_graph, AttentionMode, ModelWeights, VqaInstance};
use ramvqa::retrieval::{precompute_matrix, retrieve, Factor, RelevanceConfig, RelevanceContext, RelevanceMatrix, SupportSet};
use ramvqa::seed;
use ramvqa::synthdata::{desk_dataset, generate, generate_captions, Category, PriorShiftSpec, Split, SplitSizes, WorldSpec};

use common::*;

const SEEDS: u64 = 5;
const SWEEP: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, text: String) {
        println!("criterion {id:2} {}: {text}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, text));
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn gradient_correctness() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, String::new());
    let qa_cfg = AdaptationConfig {
        reduction: Reduction::Sum,
        ..AdaptationConfig::default()
    };
    let cap_cfg = AdaptationConfig {
        support_mode: SupportMode::Caption,
        use_projection: true,
        ..qa_cfg.clone()
    };
    for draw in 0..100 {
        let mode = if draw % 2 == 0 { AttentionMode::Full } else { AttentionMode::Uniform };
        let cfg = small_model(mode);
        let w = ModelWeights::init(&cfg, &mut rng).unwrap();
        let queries: Vec<VqaInstance> = (0..3).map(|_| random_qa(&cfg, &mut rng)).collect();
        let qa: Vec<_> = (0..3).map(|i| qa_entry(random_qa(&cfg, &mut rng), i)).collect();
        let caps: Vec<_> = (0..3).map(|i| caption_entry(random_caption(&cfg, &mut rng), i)).collect();
        let idx = [0usize, 1, 2];

        let refs: Vec<&VqaInstance> = queries.iter().collect();
        let main = |w: &ModelWeights| loss_and_gradients(w, &vqa_loss_graph(w, &refs).unwrap()).unwrap().0;
        let (_, g) = loss_and_gradients(&w, &vqa_loss_graph(&w, &refs).unwrap()).unwrap();
        let e = worst_gradient_error(&w, &g, &main, 2, &mut rng);
        if e.0 > worst.0 {
            worst = (e.0, format!("L_M {mode:?}: {}", e.1));
        }

        let support_qa = |w: &ModelWeights| adaptation_gradient(w, &qa, &idx, &qa_cfg).unwrap().0;
        let (_, g) = adaptation_gradient(&w, &qa, &idx, &qa_cfg).unwrap();
        let e = worst_gradient_error(&w, &g, &support_qa, 2, &mut rng);
        if e.0 > worst.0 {
            worst = (e.0, format!("L_A {mode:?}: {}", e.1));
        }

        let compat = |w: &ModelWeights| adaptation_gradient(w, &caps, &idx, &cap_cfg).unwrap().0;
        let (_, g) = adaptation_gradient(&w, &caps, &idx, &cap_cfg).unwrap();
        let e = worst_gradient_error(&w, &g, &compat, 2, &mut rng);
        if e.0 > worst.0 {
            worst = (e.0, format!("L_A' {mode:?}: {}", e.1));
        }
    }
    let elapsed = start.elapsed();
    (
        worst.0 < 1e-4 && elapsed < Duration::from_secs(30),
        format!("worst relative error {:.2e} ({}) in {:.1?}", worst.0, worst.1, elapsed),
    )
}

fn literal_single_step() -> (bool, String) {
    let cfg = small_model(AttentionMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = ModelWeights::init(&cfg, &mut rng).unwrap();
    let entries: Vec<_> = (0..4).map(|i| qa_entry(random_qa(&cfg, &mut rng), i)).collect();
    let alpha = 0.03;
    let config = AdaptationConfig {
        steps: 1,
        clip_norm: None,
        reduction: Reduction::Sum,
        inner_optimizer: InnerOptimizer::FixedStep { alpha },
        ..AdaptationConfig::default()
    };
    let support = RetrievedSupport::new(&entries, vec![vec![0, 1, 2, 3]], 4);
    let out = adapt(&w, &support, &config, None, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for (name, t) in w.iter() {
        let mut expected = t.clone();
        for e in &entries {
            let q = match &e.item {
                ramvqa::retrieval::SupportItem::Qa(q) => q,
                _ => unreachable!(),
            };
            let (_, g) = loss_and_gradients(&w, &vqa_loss_graph(&w, &[q]).unwrap()).unwrap();
            expected.add_assign_scaled(g.get(name).unwrap(), -alpha);
        }
        worst = worst.max(expected.max_abs_diff(out.weights.get(name).unwrap()));
    }
    (worst <= 1e-10, format!("max |θ1 - (θ0 - α·Σ∇L_A)| = {worst:.2e}"))
}

fn small_dataset(seed_value: u64) -> ramvqa::synthdata::SyntheticDataset {
    let world = WorldSpec::default();
    let sizes = SplitSizes {
        train: 256,
        val: 64,
        test: 128,
    };
    let mut ds = generate(&world, &PriorShiftSpec::desk(&world), sizes, seed_value).unwrap();
    ds.captions = generate_captions(&ds, 128, seed_value).unwrap();
    ds
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.training.max_meta_steps = 40;
    cfg.training.eval_every = 20;
    cfg.relevance.k = 10;
    cfg.relevance.k_prime = 4;
    cfg
}

/// The supervised loop written out by hand: same shuffle stream, same batch
/// rule, plain BCE gradients scaled to a summed loss, clipping and AdaDelta.
fn supervised_losses(cfg: &ExperimentConfig, ds: &ramvqa::synthdata::SyntheticDataset) -> Vec<f64> {
    let t = &cfg.training;
    let a = &cfg.adaptation;
    let mut theta = ModelState::init(&ramvqa::harness::model_config(cfg, ds), cfg.seed).unwrap().theta;
    let mut state = AdaDeltaState::new();
    let mut order = training_subset(&ds.train, t.train_fraction, cfg.seed);
    let mut shuffle = seed::stream(cfg.seed, "shuffle", 0);
    let mut losses = Vec::new();
    while losses.len() < t.max_meta_steps {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        for chunk in order.chunks(t.batch_size) {
            if chunk.len() < t.batch_size {
                continue;
            }
            let batch: Vec<&VqaInstance> = chunk.iter().map(|&i| &ds.train[i].instance).collect();
            let (loss, mut g) = loss_and_gradients(&theta, &vqa_loss_graph(&theta, &batch).unwrap()).unwrap();
            let k = (batch.len() * ds.answers.len()) as f64;
            g.scale(k);
            g.clip_global_norm(a.clip_norm.unwrap());
            let d = adadelta_step(&mut state, &g, a.adadelta_rho, a.adadelta_eps).unwrap();
            theta.apply(&d, 1.0).unwrap();
            losses.push(loss * k);
            if losses.len() == t.max_meta_steps {
                break;
            }
        }
    }
    losses
}

fn degenerate_equivalences() -> (bool, String) {
    let ds = small_dataset(21);
    let mut cfg = small_config();
    cfg.adaptation.steps = 0;
    cfg.training.patience = 100;
    let mut ws = Workspace::new(&ds);
    let report = run_training(&cfg, &mut ws, None).unwrap();
    let meta: Vec<f64> = report.meta_loss_curve.iter().map(|p| p.1).collect();
    let supervised = supervised_losses(&cfg, &ds);
    let same_losses = meta == supervised;

    let mcfg = small_model(AttentionMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = ModelWeights::init(&mcfg, &mut rng).unwrap();
    let caps: Vec<_> = (0..5).map(|i| caption_entry(random_caption(&mcfg, &mut rng), i)).collect();
    let support = RetrievedSupport::new(&caps, vec![vec![0, 1, 2, 3, 4]], 3);
    let ccfg = AdaptationConfig {
        support_mode: SupportMode::Caption,
        use_projection: true,
        ..AdaptationConfig::default()
    };
    let zero = adapt(&w, &support, &ccfg, Some(&ProjectionParams::zeros(&w)), &mut rng).unwrap();
    let psi_zero_noop = zero.weights == w;

    let mut heads_fixed = true;
    let mut others_moved = false;
    for trial in 0..20 {
        let psi = ProjectionParams::filled(&w, 0.5 + 0.1 * trial as f64);
        let out = adapt(&w, &support, &ccfg, Some(&psi), &mut rng).unwrap();
        for (name, t) in w.iter() {
            let same = out.weights.get(name).unwrap() == t;
            if names::is_head(name) {
                heads_fixed &= same;
            } else {
                others_moved |= !same;
            }
        }
    }
    (
        same_losses && psi_zero_noop && heads_fixed && others_moved,
        format!(
            "T=0 meta-losses equal supervised losses over {} steps: {same_losses}; ψ≡0 leaves θ unchanged: {psi_zero_noop}; \
             caption steps never touch classifier/output: {heads_fixed}",
            meta.len()
        ),
    )
}

struct SeedRun {
    baseline: Metrics,
    adapted: Metrics,
    uniform: Metrics,
    leave_one_out: Metrics,
    sweep: Vec<f64>,
    caption: Metrics,
    caption_unadapted: Metrics,
    timed: Duration,
}

fn seed_run(seed_value: u64) -> SeedRun {
    let ds = desk_dataset(seed_value).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed_value;

    let timer = Instant::now();
    let mut base_cfg = cfg.clone();
    base_cfg.adaptation.steps = 0;
    let mut ws = Workspace::new(&ds);
    let base = run_training(&base_cfg, &mut ws, None).unwrap();
    let baseline = run_evaluation(&base_cfg, &mut ws, &base.best, Split::Test).unwrap();

    let mut ws = Workspace::new(&ds).with_baseline(base.best.theta.clone());
    let trained = run_training(&cfg, &mut ws, None).unwrap();
    let adapted = run_evaluation(&cfg, &mut ws, &trained.best, Split::Test).unwrap();
    let timed = timer.elapsed();

    let mut r0 = cfg.clone();
    r0.relevance.factors = vec![Factor::R0];
    let r0_state = run_training(&r0, &mut ws, None).unwrap();
    let uniform = run_evaluation(&r0, &mut ws, &r0_state.best, Split::Test).unwrap();

    let leave_one_out = leave_one_out_eval(&cfg, &mut ws, &trained.best).unwrap();
    let sweep = sweep(&cfg, &mut ws, SweepAxis::SupportFraction, &SWEEP, Some(&trained.best))
        .unwrap()
        .into_iter()
        .map(|p| p.metrics.accuracy())
        .collect();

    let mut ccfg = ExperimentConfig::caption();
    ccfg.seed = seed_value;
    let cap = run_training(&ccfg, &mut ws, None).unwrap();
    let caption = run_evaluation(&ccfg, &mut ws, &cap.best, Split::Test).unwrap();
    let mut c0 = ccfg.clone();
    c0.adaptation.steps = 0;
    let caption_unadapted = run_evaluation(&c0, &mut ws, &cap.best, Split::Test).unwrap();

    SeedRun {
        baseline,
        adapted,
        uniform,
        leave_one_out,
        sweep,
        caption,
        caption_unadapted,
        timed,
    }
}

fn binomial_within(count: usize, trials: usize, p: f64) -> bool {
    let n = trials as f64;
    let sd = (n * p * (1.0 - p)).sqrt();
    (count as f64 - n * p).abs() <= 3.0 * sd
}

fn feature_row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn retrieval_suite() -> (bool, String) {
    let (k, k_prime, trials) = (10usize, 3usize, 20_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let scores: Vec<f32> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
    let matrix = RelevanceMatrix::new(1, 40, scores.clone()).unwrap();
    let mut order: Vec<usize> = (0..40).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let top: HashSet<usize> = order[..k].iter().copied().collect();
    let rc = RelevanceConfig {
        factors: vec![Factor::R1],
        k,
        k_prime,
    };
    let mut counts = vec![0usize; 40];
    for _ in 0..trials {
        for j in retrieve(0, &matrix, &rc, &mut rng, None).unwrap() {
            counts[j] += 1;
        }
    }
    let p = k_prime as f64 / k as f64;
    let freq_ok = (0..40).all(|j| if top.contains(&j) { binomial_within(counts[j], trials, p) } else { counts[j] == 0 });

    let ds = desk_dataset(0).unwrap();
    let cfg = ExperimentConfig::default();
    let test_support = support_set(&ds, SupportSource::Test).unwrap();
    let mut ws = Workspace::new(&ds);
    let rel = RelevanceConfig {
        factors: vec![Factor::R1, Factor::R3],
        ..cfg.relevance.clone()
    };
    ws.prepare(Split::Test, SupportSource::Test, &rel).unwrap();
    let r = ws.retriever(Split::Test, SupportSource::Test, &rel).unwrap();
    let mut violations = 0usize;
    let mut audited = 0usize;
    for (b, chunk) in ds.test.chunks(cfg.evaluation.batch_size).enumerate() {
        let rows: Vec<usize> = (0..chunk.len()).map(|i| b * cfg.evaluation.batch_size + i).collect();
        let images: HashSet<u64> = chunk.iter().map(|e| e.image_id).collect();
        let (pools, _) = r.pools(&rows, &images).unwrap();
        for (e, pool) in chunk.iter().zip(pools) {
            audited += pool.len();
            violations += pool.iter().filter(|&&j| test_support.entries[j].image_id == e.image_id).count();
        }
    }

    let q = |tokens: &[usize], f: &[f64]| VqaInstance {
        question: tokens.to_vec(),
        features: feature_row(f),
        answer_scores: vec![0.0],
    };
    let queries = [q(&[0, 1, 2], &[1.0, 0.0]), q(&[3, 4, 5, 9], &[0.0, 1.0])];
    let support = SupportSet {
        entries: vec![
            qa_entry(q(&[1, 2, 9], &[1.0, 0.0]), 0),
            qa_entry(q(&[4, 5, 3, 6], &[-1.0, 0.0]), 1),
        ],
    };
    let ctx = RelevanceContext {
        baseline: None,
        answer_tokens: &[],
    };
    let only = |f: Factor| RelevanceConfig {
        factors: vec![f],
        k: 2,
        k_prime: 2,
    };
    let m1 = precompute_matrix(&queries, &support, &only(Factor::R1), &ctx).unwrap();
    let m3 = precompute_matrix(&queries, &support, &only(Factor::R3), &ctx).unwrap();
    let r1_ok = m1.scores() == [2.0, 0.0, 1.0, 3.0];
    let r3_ok = m3.scores() == [1.0, 0.0, 0.5, 0.5];
    (
        freq_ok && violations == 0 && audited > 0 && r1_ok && r3_ok,
        format!(
            "top-K frequencies within 3σ of K′/K: {freq_ok}; masked leave-one-out audit {violations} violations over {audited} items; \
             r1 2×2 exact: {r1_ok}; r3 2×2 exact: {r3_ok}"
        ),
    )
}

fn determinism() -> (bool, String) {
    let run = || {
        let ds = small_dataset(41);
        let cfg = small_config();
        let mut base_cfg = cfg.clone();
        base_cfg.adaptation.steps = 0;
        let mut ws = Workspace::new(&ds);
        let base = run_training(&base_cfg, &mut ws, None).unwrap();
        let mut ws = Workspace::new(&ds).with_baseline(base.best.theta.clone());
        let trained = run_training(&cfg, &mut ws, None).unwrap();
        let m = run_evaluation(&cfg, &mut ws, &trained.best, Split::Test).unwrap();
        let loo = leave_one_out_eval(&cfg, &mut ws, &trained.best).unwrap();
        let sw = sweep(&cfg, &mut ws, SweepAxis::SupportFraction, &[0.5, 1.0], Some(&trained.best)).unwrap();
        (ds, trained.best, trained.meta_loss_curve, m, loo, sw.into_iter().map(|p| p.metrics).collect::<Vec<_>>())
    };
    let a = run();
    let b = run();
    let same = a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3 && a.4 == b.4 && a.5 == b.5;
    (same, format!("data, weights, loss curve and metrics bit-identical across reruns: {same}"))
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };

    let (ok, text) = gradient_correctness();
    report.record(1, ok, text);
    let (ok, text) = literal_single_step();
    report.record(2, ok, text);
    let (ok, text) = degenerate_equivalences();
    report.record(3, ok, text);

    let runs: Vec<SeedRun> = (0..SEEDS).map(seed_run).collect();
    let list = |f: &dyn Fn(&SeedRun) -> String| runs.iter().map(f).collect::<Vec<_>>().join(" ");

    let wins = runs.iter().filter(|r| r.adapted.accuracy() - r.baseline.accuracy() >= 0.03).count();
    let timed: Duration = runs.iter().map(|r| r.timed).sum();
    report.record(
        4,
        wins >= 4 && timed < Duration::from_secs(15 * 60),
        format!(
            "adapted minus baseline (points): [{}]; {wins}/{SEEDS} seeds ≥ 3; training and evaluation took {:.0?}",
            list(&|r| pct(r.adapted.accuracy() - r.baseline.accuracy())),
            timed
        ),
    );

    let wins = runs.iter().filter(|r| r.adapted.accuracy() >= r.uniform.accuracy()).count();
    report.record(
        5,
        wins >= 4,
        format!(
            "r1·r2·r3 vs r0 test accuracy: [{}]; {wins}/{SEEDS} seeds",
            list(&|r| format!("{}/{}", pct(r.adapted.accuracy()), pct(r.uniform.accuracy())))
        ),
    );

    let wins = runs.iter().filter(|r| r.leave_one_out.accuracy() > r.adapted.accuracy()).count();
    report.record(
        6,
        wins >= 4,
        format!(
            "leave-one-out vs train support: [{}]; {wins}/{SEEDS} seeds",
            list(&|r| format!("{}/{}", pct(r.leave_one_out.accuracy()), pct(r.adapted.accuracy())))
        ),
    );

    let rhos: Vec<f64> = runs.iter().map(|r| spearman(&SWEEP, &r.sweep)).collect();
    let wins = rhos.iter().filter(|&&r| r > 0.0).count();
    report.record(
        7,
        wins >= 4,
        format!(
            "Spearman ρ over support fractions: [{}]; {wins}/{SEEDS} seeds",
            rhos.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ")
        ),
    );

    let other = |m: &Metrics| m.category_accuracy(Category::Other);
    let wins = runs.iter().filter(|r| other(&r.caption) - other(&r.caption_unadapted) >= 0.01).count();
    report.record(
        8,
        wins >= 3,
        format!(
            "caption-adapted vs same model at T=0 on other: [{}]; {wins}/{SEEDS} seeds ≥ 1 point; T=0-trained baseline other: [{}]",
            list(&|r| format!("{}/{}", pct(other(&r.caption)), pct(other(&r.caption_unadapted)))),
            list(&|r| pct(other(&r.baseline)))
        ),
    );

    let (ok, text) = retrieval_suite();
    report.record(9, ok, text);
    let (ok, text) = determinism();
    report.record(10, ok, text);

    let failed: Vec<usize> = report.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
