use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use ramvqa::harness::{
    file_sha256, leave_one_out_eval, read_metrics_file, render_table, run_evaluation, run_training, spearman, sweep,
    to_csv, write_metrics_file, ExperimentConfig, MetricsRow, ModelState, SupportSource, SweepAxis, Workspace,
};
use ramvqa::retrieval::Factor;
use ramvqa::synthdata::{generate, generate_captions, PriorShiftSpec, Split, SplitSizes, SyntheticDataset, WorldSpec, DESK_CAPTIONS};

#[derive(Parser)]
#[command(name = "ramvqa", version, about = "Retrieval-augmented adaptation experiments on a synthetic VQA benchmark")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Field override such as `training.batch_size=64`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Start from the caption-mode configuration instead of the default one.
    #[arg(long, global = true)]
    caption: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Train,
    Test,
    Captions,
}

impl From<SourceArg> for SupportSource {
    fn from(s: SourceArg) -> SupportSource {
        match s {
            SourceArg::Train => SupportSource::Train,
            SourceArg::Test => SupportSource::Test,
            SourceArg::Captions => SupportSource::Captions,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    SupportFraction,
    TrainFraction,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits into `paths.dataset`.
    GenData {
        #[arg(long, default_value_t = 4000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        /// World and prior-shift description (JSON with `world` and `shift`).
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Add a caption pool to the dataset in `paths.dataset`.
    GenCaptions {
        #[arg(long, default_value_t = DESK_CAPTIONS)]
        size: usize,
    },
    /// Score queries against a support source and store the matrix in `paths.relevance`.
    PrecomputeRelevance {
        #[arg(long, value_enum, default_value = "train")]
        queries: SplitArg,
        #[arg(long, value_enum, default_value = "train")]
        source: SourceArg,
    },
    /// Meta-train (or, with `adaptation.steps=0`, train the baseline) into `paths.checkpoint`.
    Train,
    /// Evaluate `paths.checkpoint` with support from `evaluation.support`.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Evaluate on the test split with masked test QAs as support.
    LeaveOneOut,
    /// Test accuracy across training-set or support-set fractions.
    Sweep {
        #[arg(long, value_enum, default_value = "support-fraction")]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        points: Vec<f64>,
    },
    /// Collect metric files into a CSV and a table.
    Report {
        /// Metric files; defaults to every `.json` file in `paths.output`.
        files: Vec<PathBuf>,
        /// Where to write the CSV; defaults to `paths.output/report.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(serde::Deserialize)]
struct WorldFile {
    world: WorldSpec,
    shift: PriorShiftSpec,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = if cli.caption { ExperimentConfig::caption() } else { ExperimentConfig::default() };
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::Table::try_from(&base)?;
    let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ramvqa::Error::Config(e.to_string()))?;
    merge(&mut table, file);
    let merged = toml::to_string(&table)?;
    Ok(ExperimentConfig::from_toml_with(&merged, &cli.overrides)?)
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    Ok(SyntheticDataset::load(&cfg.paths.dataset)?)
}

fn workspace<'a>(cfg: &ExperimentConfig, ds: &'a SyntheticDataset) -> Result<Workspace<'a>> {
    let mut ws = Workspace::new(ds);
    ws.relevance_dir = Some(cfg.paths.relevance.clone());
    if cfg.relevance.factors.contains(&Factor::R2) && cfg.adaptation.steps > 0 {
        let path = &cfg.paths.baseline;
        if !path.exists() {
            bail!(ramvqa::Error::Config(format!(
                "factor r2 needs a baseline checkpoint at {} (train one with adaptation.steps=0)",
                path.display()
            )));
        }
        ws.baseline = Some(ModelState::load(path)?.theta);
        ws.baseline_sha256 = Some(file_sha256(path)?);
    }
    Ok(ws)
}

fn emit(cfg: &ExperimentConfig, label: &str, metrics: &ramvqa::harness::Metrics) -> Result<MetricsRow> {
    let name = format!("{}-{label}", cfg.name);
    let path = cfg.paths.output.join(format!("{name}.json"));
    write_metrics_file(&path, &name, metrics)?;
    info!("wrote {}", path.display());
    Ok(MetricsRow::new(&name, metrics))
}

fn show(rows: &[MetricsRow]) -> Result<()> {
    print!("{}", render_table(rows));
    println!();
    print!("{}", to_csv(rows)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData {
            train,
            val,
            test,
            world,
        } => {
            let (world, shift) = match world {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let f: WorldFile = serde_json::from_str(&text)
                        .map_err(|e| ramvqa::Error::Format { path: p.clone(), detail: e.to_string() })?;
                    (f.world, f.shift)
                }
                None => {
                    let w = WorldSpec::default();
                    let s = PriorShiftSpec::desk(&w);
                    (w, s)
                }
            };
            let ds = generate(&world, &shift, SplitSizes { train, val, test }, cfg.seed)?;
            ds.save(&cfg.paths.dataset)?;
            println!(
                "wrote {} train, {} val, {} test questions to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                cfg.paths.dataset.display()
            );
        }
        Command::GenCaptions { size } => {
            let mut ds = load_dataset(&cfg)?;
            ds.captions = generate_captions(&ds, size, cfg.seed)?;
            ds.save_captions(&cfg.paths.dataset)?;
            println!("wrote {} captions to {}", ds.captions.len(), cfg.paths.dataset.display());
        }
        Command::PrecomputeRelevance { queries, source } => {
            let ds = load_dataset(&cfg)?;
            let mut ws = workspace(&cfg, &ds)?;
            ws.relevance_dir = None;
            let (q, s) = (Split::from(queries), SupportSource::from(source));
            ws.prepare(q, s, &cfg.relevance)?;
            let path = ws.write_matrix(&cfg.paths.relevance, q, s, &cfg.relevance)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let ds = load_dataset(&cfg)?;
            let mut ws = workspace(&cfg, &ds)?;
            let report = run_training(&cfg, &mut ws, Some(&cfg.paths.checkpoint))?;
            for p in &report.history {
                println!(
                    "step {:>6}  meta-loss {:>10.4}  val accuracy {:.4}  val loss {:.4}",
                    p.step, p.train_meta_loss, p.val_accuracy, p.val_loss
                );
            }
            println!(
                "best val accuracy {:.4} after {} meta-steps{}; checkpoint {}",
                report.best_val_accuracy,
                report.steps,
                if report.stopped_early { " (early stop)" } else { "" },
                cfg.paths.checkpoint.display()
            );
        }
        Command::Eval { split } => {
            let ds = load_dataset(&cfg)?;
            let mut ws = workspace(&cfg, &ds)?;
            let state = ModelState::load(&cfg.paths.checkpoint)?;
            let split = Split::from(split);
            let m = run_evaluation(&cfg, &mut ws, &state, split)?;
            show(&[emit(&cfg, split.name(), &m)?])?;
        }
        Command::LeaveOneOut => {
            let ds = load_dataset(&cfg)?;
            let mut ws = workspace(&cfg, &ds)?;
            let state = ModelState::load(&cfg.paths.checkpoint)?;
            let m = leave_one_out_eval(&cfg, &mut ws, &state)?;
            show(&[emit(&cfg, "leave-one-out", &m)?])?;
        }
        Command::Sweep { axis, points } => {
            let ds = load_dataset(&cfg)?;
            let mut ws = workspace(&cfg, &ds)?;
            let (axis, label) = match axis {
                AxisArg::SupportFraction => (SweepAxis::SupportFraction, "support"),
                AxisArg::TrainFraction => (SweepAxis::TrainFraction, "train"),
            };
            let state = match axis {
                SweepAxis::SupportFraction => Some(ModelState::load(&cfg.paths.checkpoint)?),
                SweepAxis::TrainFraction => None,
            };
            let result = sweep(&cfg, &mut ws, axis, &points, state.as_ref())?;
            let mut rows = Vec::new();
            for p in &result {
                rows.push(emit(&cfg, &format!("{label}-{:.2}", p.fraction), &p.metrics)?);
            }
            show(&rows)?;
            let acc: Vec<f64> = result.iter().map(|p| p.metrics.accuracy()).collect();
            println!("spearman {:.4}", spearman(&points, &acc));
        }
        Command::Report { files, csv } => {
            let files = if files.is_empty() { metric_files(&cfg.paths.output)? } else { files };
            if files.is_empty() {
                bail!(ramvqa::Error::Config(format!("no metric files in {}", cfg.paths.output.display())));
            }
            let mut rows = Vec::new();
            for f in &files {
                let (name, m) = read_metrics_file(f)?;
                rows.push(MetricsRow::new(&name, &m));
            }
            let text = to_csv(&rows)?;
            let out = csv.unwrap_or_else(|| cfg.paths.output.join("report.csv"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", render_table(&rows));
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn metric_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(out),
    };
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Exit status and short kind for an error chain.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    use ramvqa::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Unreachable(_) => (3, "config"),
                E::Io { .. } => (4, "io"),
                E::Format { .. } | E::Json(_) => (4, "format"),
                E::NonFinite { .. } | E::NonFiniteLoss { .. } | E::NonFiniteMetaLoss => (5, "numeric"),
                E::EmptySupport => (5, "support"),
                _ => (1, "internal"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (4, "io");
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() || cause.downcast_ref::<toml::ser::Error>().is_some() {
            return (3, "config");
        }
    }
    (1, "internal")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
