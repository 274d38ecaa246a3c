use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leukopipe::augment::{execute_balance, plan_balance, Sampling};
use leukopipe::backbone::{build_model, Arch, Checkpoint};
use leukopipe::dataset::{
    carve_internal_val, ingest, load_manifest, save_manifest, stratified_split, LabelRule, Split, DEFAULT_EXTENSIONS,
};
use leukopipe::metrics::{evaluate, read_predictions, write_predictions, MetricsReport};
use leukopipe::par::Parallelism;
use leukopipe::pipeline::{
    parse_stages, read_metrics, run_pipeline, PipelineError, RunConfig, RunLayout, Stage, StageFailure, StageOutcome,
    RESOLVED_CONFIG,
};
use leukopipe::report::{bundled_literature, emit_comparison, emit_metrics_table, load_literature, Format};
use leukopipe::toy::{write_toy_dataset, ToySpec};
use leukopipe::train::{evaluate_split, train_loop, TrainOptions};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "leukopipe", version, about = "Blood-smear cell classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan source directories into a manifest of original images.
    Ingest(IngestArgs),
    /// Assign a stratified TRAIN/TEST split.
    Split(SplitArgs),
    /// Move a stratified fraction of TRAIN originals to INTERNAL_VAL.
    CarveVal(CarveArgs),
    /// Generate augmented TRAIN images until each class has M samples.
    Augment(AugmentArgs),
    /// Fine-tune a backbone on a balanced manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the TEST split, or score a prediction file.
    Eval(EvalArgs),
    /// Print result tables for one or more runs.
    Report(ReportArgs),
    /// Run pipeline stages from a config file.
    Run(RunArgs),
    /// Write a synthetic two-class image set.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    /// TOML label rule; defaults to matching "hem"/"all" in directory names.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CarveArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run config whose [augment] section sets the transform parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    target_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    uniform_sampling: bool,
    /// Directory for generated images.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    arch: Option<String>,
    /// Run directory for checkpoints, logs and the resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Line-delimited predictions `{id, label, p_all}`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Also write the computed predictions here (checkpoint mode).
    #[arg(long)]
    write_predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Add the literature comparison; without a file the bundled table is used.
    #[arg(long, num_args = 0..=1)]
    compare: Option<Option<PathBuf>>,
    #[arg(long, default_value = "md")]
    format: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset, e.g. `ingest,split`. Defaults to all stages.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn failed(stage: Stage) -> impl Fn(StageFailure) -> PipelineError {
    move |source| PipelineError::Stage { stage, source }
}

fn in_stage<E: Into<StageFailure>>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

fn io_in(stage: Stage, path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Stage {
        stage,
        source: StageFailure::Io {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<(), PipelineError> {
    let rule = match &a.labels {
        Some(p) => LabelRule::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
        None => LabelRule::c_nmc(),
    };
    let m = ingest(&a.sources, &rule, &DEFAULT_EXTENSIONS, Parallelism::from_workers(a.workers))
        .map_err(in_stage(Stage::Ingest))?;
    save_manifest(&m, &a.out).map_err(in_stage(Stage::Ingest))?;
    let [hem, all] = m.class_counts(None, None);
    println!("{} records ({hem} HEM, {all} ALL) -> {}", m.len(), a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<(), PipelineError> {
    let m = load_manifest(&a.manifest).map_err(in_stage(Stage::Split))?;
    let m = stratified_split(&m, a.test_fraction, a.seed).map_err(in_stage(Stage::Split))?;
    save_manifest(&m, &a.out).map_err(in_stage(Stage::Split))?;
    let [th, ta] = m.class_counts(Some(Split::Train), None);
    let [sh, sa] = m.class_counts(Some(Split::Test), None);
    println!("train {th} HEM / {ta} ALL, test {sh} HEM / {sa} ALL");
    Ok(())
}

fn cmd_carve(a: CarveArgs) -> Result<(), PipelineError> {
    let m = load_manifest(&a.manifest).map_err(in_stage(Stage::CarveVal))?;
    let m = carve_internal_val(&m, a.fraction, a.seed).map_err(in_stage(Stage::CarveVal))?;
    save_manifest(&m, &a.out).map_err(in_stage(Stage::CarveVal))?;
    let [vh, va] = m.class_counts(Some(Split::InternalVal), None);
    println!("internal val {vh} HEM / {va} ALL");
    Ok(())
}

fn cmd_augment(a: AugmentArgs) -> Result<(), PipelineError> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.augment,
        None => Default::default(),
    };
    let sampling = if a.uniform_sampling {
        Sampling::UniformWithReplacement
    } else {
        Sampling::RoundRobin
    };
    let m = load_manifest(&a.manifest).map_err(in_stage(Stage::Augment))?;
    let plan = plan_balance(&m, a.target_m, sampling).map_err(in_stage(Stage::Augment))?;
    println!("generating {} HEM and {} ALL samples", plan.deficits[0], plan.deficits[1]);
    let m = execute_balance(&m, &plan, &cfg, a.seed, &a.out_dir, Parallelism::from_workers(a.workers))
        .map_err(in_stage(Stage::Augment))?;
    save_manifest(&m, &a.out).map_err(in_stage(Stage::Augment))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(arch) = &a.arch {
        cfg.model.arch = arch.parse::<Arch>().map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    cfg.run.out_dir = a.out.clone();
    let cfg = cfg.resolve()?;
    let layout = RunLayout::new(&a.out);
    layout.create().map_err(io_in(Stage::Train, &a.out))?;
    let resolved = layout.resolved_config();
    fs::write(&resolved, cfg.to_toml()).map_err(io_in(Stage::Train, &resolved))?;

    let m = load_manifest(&a.manifest).map_err(in_stage(Stage::Train))?;
    let model = build_model(&cfg.model_spec()).map_err(in_stage(Stage::Train))?;
    let mut opts = TrainOptions::new(layout.checkpoint_dir(), cfg.augment.digest());
    opts.parallelism = cfg.parallelism();
    opts.prefetch = cfg.train.prefetch;
    let (ckpt, log) = train_loop(&model, &m, &cfg.train_config(), &opts).map_err(in_stage(Stage::Train))?;
    log.save(&layout.train_log()).map_err(in_stage(Stage::Train))?;
    println!(
        "best epoch {} (val macro F1 {:.4}), checkpoint {}",
        log.best_epoch,
        log.best_val_macro_f1,
        ckpt.weights.display()
    );
    Ok(())
}

fn print_metrics(r: &MetricsReport) {
    println!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
}

fn cmd_eval(a: EvalArgs) -> Result<(), PipelineError> {
    let preds = match (&a.predictions, &a.checkpoint, &a.manifest) {
        (Some(p), _, _) => read_predictions(p).map_err(in_stage(Stage::Eval))?,
        (None, Some(ckpt), Some(manifest)) => {
            let ckpt = Checkpoint::load(ckpt).map_err(in_stage(Stage::Eval))?;
            let model = ckpt.restore().map_err(in_stage(Stage::Eval))?;
            let m = load_manifest(manifest).map_err(in_stage(Stage::Eval))?;
            let mut opts = TrainOptions::new(PathBuf::new(), String::new());
            opts.parallelism = Parallelism::from_workers(a.workers);
            let (preds, _) = evaluate_split(&model, &m, Split::Test, a.batch_size, &opts).map_err(in_stage(Stage::Eval))?;
            preds
        }
        _ => {
            return Err(PipelineError::Config(
                "eval needs --predictions FILE or --checkpoint DIR --manifest FILE".into(),
            ))
        }
    };
    if let Some(out) = &a.write_predictions {
        write_predictions(&preds, out).map_err(in_stage(Stage::Eval))?;
    }
    print_metrics(&evaluate(&preds).map_err(in_stage(Stage::Eval))?);
    Ok(())
}

fn run_name(run: &Path) -> String {
    let arch = fs::read_to_string(run.join(RESOLVED_CONFIG))
        .ok()
        .and_then(|t| RunConfig::from_toml_str(&t).ok())
        .map(|c| c.model.arch.display_name().to_string());
    let dir = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match arch {
        Some(a) if !dir.is_empty() => format!("{a} ({dir})"),
        Some(a) => a,
        None => dir,
    }
}

fn cmd_report(a: ReportArgs) -> Result<(), PipelineError> {
    let format: Format = a.format.parse().map_err(|e: leukopipe::report::ReportError| PipelineError::Config(e.to_string()))?;
    let mut reports = Vec::new();
    for run in &a.runs {
        let path = RunLayout::new(run).metrics();
        if !path.is_file() {
            return Err(PipelineError::StagePrereqMissing {
                stage: Stage::Report,
                missing: path,
            });
        }
        reports.push((run_name(run), read_metrics(&path).map_err(failed(Stage::Report))?));
    }
    print!("{}", emit_metrics_table(&reports, format).map_err(in_stage(Stage::Report))?);
    if let Some(source) = a.compare {
        let literature = match source {
            Some(p) => load_literature(&p).map_err(in_stage(Stage::Report))?,
            None => bundled_literature(),
        };
        let (name, best) = reports
            .iter()
            .max_by(|x, y| x.1.macro_f1.total_cmp(&y.1.macro_f1))
            .expect("at least one run");
        println!();
        print!("{}", emit_comparison(best.macro_f1, name, &literature, format));
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), PipelineError> {
    let cfg = RunConfig::load(&a.config)?;
    let stages = match &a.stages {
        Some(list) => parse_stages(list)?,
        None => Stage::ALL.to_vec(),
    };
    let summary = run_pipeline(&cfg, &stages, a.force)?;
    for (stage, outcome) in &summary.stages {
        let word = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::Skipped => "skipped (up to date)",
        };
        println!("{stage}: {word}");
    }
    println!("artifacts in {}", summary.root.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), PipelineError> {
    let spec = ToySpec {
        per_class: a.per_class,
        side: a.side,
        seed: a.seed,
    };
    let paths = write_toy_dataset(&a.out, spec).map_err(io_in(Stage::Ingest, &a.out))?;
    println!("{} images -> {}", paths.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Split(a) => cmd_split(a),
        Command::CarveVal(a) => cmd_carve(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
