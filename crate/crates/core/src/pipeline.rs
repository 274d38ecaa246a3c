//! Config-driven, resumable pipeline runs.
//!
//! A run directory holds every artifact:
//!
//! ```text
//! RUN_DIR/
//!   config.resolved        fully resolved TOML snapshot
//!   manifest/              ingest, split, carved and balanced manifests
//!   augmented/             generated training images
//!   checkpoints/best/      weights + sidecar of the best epoch
//!   logs/                  train log and stage completion markers
//!   reports/               predictions, metrics and tables
//! ```
//!
//! Each stage writes a marker holding the digest of the resolved config;
//! a later invocation with the same config skips the stage unless forced.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{execute_balance, plan_balance, AugmentError, AugmentationConfig, Sampling};
use crate::backbone::{build_model, Arch, BackboneError, Checkpoint, ModelSpec};
use crate::dataset::{
    carve_internal_val, ingest, load_manifest, save_manifest, stratified_split, DatasetError, DatasetManifest,
    LabelRule, Split, DEFAULT_EXTENSIONS,
};
use crate::metrics::{write_predictions, MetricsError, MetricsReport};
use crate::par::Parallelism;
use crate::report::{
    bundled_literature, emit_comparison, emit_metrics_table, load_literature, Format, ReportError,
};
use crate::seed::{derive_seed, sha256_hex};
use crate::train::{evaluate_split, train_loop, TrainConfig, TrainError, TrainLog, TrainOptions};

pub const ENV_PREFIX: &str = "LEUKOPIPE_";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Split,
    CarveVal,
    Augment,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Split,
        Stage::CarveVal,
        Stage::Augment,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::CarveVal => "carve-val",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == key)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

/// Parse a comma-separated stage list into pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, PipelineError> {
    let mut stages = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

#[derive(Debug, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} needs {missing}; run the earlier stages first")]
    StagePrereqMissing { stage: Stage, missing: PathBuf },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageFailure,
    },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 training divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::StagePrereqMissing { .. } => 3,
            PipelineError::Stage { source, .. } => match source {
                StageFailure::Dataset(_) | StageFailure::Augment(_) => 3,
                StageFailure::Train(TrainError::DivergedLoss { .. }) => 4,
                StageFailure::Train(TrainError::EmptySplit(_) | TrainError::Image { .. }) => 3,
                StageFailure::Train(TrainError::InvalidConfig(_)) => 2,
                StageFailure::Backbone(BackboneError::UnknownArch(_) | BackboneError::InvalidSpec(_)) => 2,
                _ => 1,
            },
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(StageFailure) -> PipelineError {
    move |source| PipelineError::Stage { stage, source }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> StageFailure + '_ {
    move |source| StageFailure::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for decoding and augmentation; 0 = all cores, 1 = sequential.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub sources: Vec<PathBuf>,
    pub extensions: Vec<String>,
    /// Directory-name overrides, e.g. `{ "hem" = "HEM" }`.
    pub labels: BTreeMap<String, crate::dataset::ClassLabel>,
    pub substring_fallback: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            labels: BTreeMap::new(),
            substring_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: f64,
    pub internal_val_fraction: f64,
    pub seed: Option<u64>,
    pub val_seed: Option<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.1,
            internal_val_fraction: 0.1,
            seed: None,
            val_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub target_m: usize,
    pub sampling: Sampling,
    pub seed: Option<u64>,
}

impl Default for BalanceSection {
    fn default() -> Self {
        Self {
            target_m: 10_000,
            sampling: Sampling::RoundRobin,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub pretrained: bool,
    pub head_seed: Option<u64>,
    pub freeze_backbone: bool,
    pub weights: Option<PathBuf>,
    pub weights_sha256: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::EffnetB3,
            pretrained: true,
            head_seed: None,
            freeze_backbone: false,
            weights: None,
            weights_sha256: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub seed: Option<u64>,
    pub prefetch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            min_delta: t.min_delta,
            seed: None,
            prefetch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Alternative literature file; the bundled table is used otherwise.
    pub literature: Option<PathBuf>,
}

#[allow(clippy::derivable_impls)]
impl Default for ReportSection {
    fn default() -> Self {
        Self { literature: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub split: SplitSection,
    pub augment: AugmentationConfig,
    pub balance: BalanceSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub report: ReportSection,
}

/// Seed for one stage, derived from the run seed. Kept below 2^63 so it
/// survives a TOML round trip.
pub fn stage_seed(run_seed: u64, stage: &str) -> u64 {
    derive_seed(run_seed, stage, 0) & (i64::MAX as u64)
}

/// Parse an override value as a TOML scalar or array, falling back to a
/// bare string.
fn parse_override(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

const SECTIONS: [&str; 8] = ["run", "data", "split", "augment", "balance", "model", "train", "report"];

/// Apply `LEUKOPIPE_<SECTION>_<KEY>=value` overrides to a parsed config table.
pub fn apply_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>, PipelineError> {
    let mut applied = Vec::new();
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_') else {
            continue;
        };
        if !SECTIONS.contains(&section) {
            continue;
        }
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(sec) = entry else {
            return Err(PipelineError::Config(format!("[{section}] is not a table")));
        };
        sec.insert(key.to_string(), parse_override(&raw));
        applied.push(format!("{section}.{key}"));
    }
    Ok(applied)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    pub fn from_toml_with_env(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, PipelineError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        apply_overrides(&mut table, vars)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Read a config file and apply environment overrides. Relative paths
    /// in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with_env(&text, std::env::vars())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.out_dir);
        self.data.sources.iter_mut().for_each(fix);
        if let Some(w) = self.model.weights.as_mut() {
            fix(w);
        }
        if let Some(l) = self.report.literature.as_mut() {
            fix(l);
        }
    }

    /// Fill every derived seed from `run.seed` and validate.
    pub fn resolve(mut self) -> Result<Self, PipelineError> {
        let s = self.run.seed;
        self.split.seed.get_or_insert(stage_seed(s, "split"));
        self.split.val_seed.get_or_insert(stage_seed(s, "carve-val"));
        self.balance.seed.get_or_insert(stage_seed(s, "augment"));
        self.model.head_seed.get_or_insert(stage_seed(s, "model/head"));
        self.train.seed.get_or_insert(stage_seed(s, "train"));
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!("split.test_fraction {} not in (0, 1)", self.split.test_fraction));
        }
        if !(self.split.internal_val_fraction >= 0.0 && self.split.internal_val_fraction < 1.0) {
            return bad(format!(
                "split.internal_val_fraction {} not in [0, 1)",
                self.split.internal_val_fraction
            ));
        }
        self.augment
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.model.pretrained && self.model.weights.is_none() {
            return bad(format!("model.pretrained is set but model.weights is missing for {}", self.model.arch));
        }
        Ok(())
    }

    pub fn label_rule(&self) -> LabelRule {
        LabelRule {
            labels: self
                .data
                .labels
                .iter()
                .map(|(k, v)| (k.to_lowercase(), *v))
                .collect(),
            substring_fallback: self.data.substring_fallback,
        }
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_workers(self.run.workers)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            max_epochs: self.train.max_epochs,
            early_stop_patience: self.train.early_stop_patience,
            min_delta: self.train.min_delta,
            global_seed: self.train.seed.unwrap_or(stage_seed(self.run.seed, "train")),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(
            self.model.arch,
            self.model.pretrained,
            self.model
                .head_seed
                .unwrap_or(stage_seed(self.run.seed, "model/head")),
        );
        spec.freeze_backbone = self.model.freeze_backbone;
        if let Some(w) = &self.model.weights {
            spec = spec.with_weights(w, self.model.weights_sha256.clone());
        }
        spec
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join(RESOLVED_CONFIG)
    }
    pub fn manifest_dir(&self) -> PathBuf {
        self.root.join("manifest")
    }
    pub fn augmented_dir(&self) -> PathBuf {
        self.root.join("augmented")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("best")
    }
    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn train_log(&self) -> PathBuf {
        self.logs_dir().join("train_log.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.reports_dir().join("predictions.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.reports_dir().join("metrics.json")
    }

    /// Manifest written by `stage`.
    pub fn stage_manifest(&self, stage: Stage) -> Option<PathBuf> {
        let name = match stage {
            Stage::Ingest => "ingested.jsonl",
            Stage::Split => "split.jsonl",
            Stage::CarveVal => "carved.jsonl",
            Stage::Augment => "balanced.jsonl",
            _ => return None,
        };
        Some(self.manifest_dir().join(name))
    }

    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.logs_dir().join(format!("{}.done", stage.name()))
    }

    pub fn create(&self) -> std::io::Result<()> {
        for dir in [
            self.manifest_dir(),
            self.augmented_dir(),
            self.checkpoint_dir(),
            self.logs_dir(),
            self.reports_dir(),
        ] {
            fs::create_dir_all(dir)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Marker {
    stage: String,
    config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub root: PathBuf,
    pub stages: Vec<(Stage, StageOutcome)>,
}

fn write_if_changed(path: &Path, content: &str) -> std::io::Result<()> {
    if fs::read_to_string(path).is_ok_and(|old| old == content) {
        return Ok(());
    }
    fs::write(path, content)
}

fn load_stage_input(layout: &RunLayout, stage: Stage, from: Stage) -> Result<DatasetManifest, PipelineError> {
    let path = layout.stage_manifest(from).expect("manifest-producing stage");
    if !path.is_file() {
        return Err(PipelineError::StagePrereqMissing { stage, missing: path });
    }
    load_manifest(&path).map_err(|e| stage_err(stage)(e.into()))
}

/// Stage body. Returns the failure without stage attribution.
fn run_stage(cfg: &RunConfig, layout: &RunLayout, stage: Stage) -> Result<(), PipelineError> {
    let fail = stage_err(stage);
    let par = cfg.parallelism();
    let save = |m: &DatasetManifest| {
        let out = layout.stage_manifest(stage).expect("manifest stage");
        save_manifest(m, &out).map_err(|e| fail(e.into()))
    };
    match stage {
        Stage::Ingest => {
            if cfg.data.sources.is_empty() {
                return Err(PipelineError::Config("data.sources is empty".into()));
            }
            let exts: Vec<&str> = cfg.data.extensions.iter().map(String::as_str).collect();
            let m = ingest(&cfg.data.sources, &cfg.label_rule(), &exts, par).map_err(|e| fail(e.into()))?;
            save(&m)
        }
        Stage::Split => {
            let m = load_stage_input(layout, stage, Stage::Ingest)?;
            let seed = cfg.split.seed.expect("resolved");
            let m = stratified_split(&m, cfg.split.test_fraction, seed).map_err(|e| fail(e.into()))?;
            save(&m)
        }
        Stage::CarveVal => {
            let m = load_stage_input(layout, stage, Stage::Split)?;
            let seed = cfg.split.val_seed.expect("resolved");
            let m = carve_internal_val(&m, cfg.split.internal_val_fraction, seed).map_err(|e| fail(e.into()))?;
            save(&m)
        }
        Stage::Augment => {
            let m = load_stage_input(layout, stage, Stage::CarveVal)?;
            let plan = plan_balance(&m, cfg.balance.target_m, cfg.balance.sampling).map_err(|e| fail(e.into()))?;
            tracing::info!(hem = plan.deficits[0], all = plan.deficits[1], "augmentation deficits");
            let out = layout.augmented_dir();
            fs::create_dir_all(&out).map_err(|e| fail(io_failure(&out)(e)))?;
            let seed = cfg.balance.seed.expect("resolved");
            let m = execute_balance(&m, &plan, &cfg.augment, seed, &out, par).map_err(|e| fail(e.into()))?;
            save(&m)
        }
        Stage::Train => {
            let m = load_stage_input(layout, stage, Stage::Augment)?;
            let model = build_model(&cfg.model_spec()).map_err(|e| fail(e.into()))?;
            let mut opts = TrainOptions::new(layout.checkpoint_dir(), cfg.augment.digest());
            opts.parallelism = par;
            opts.prefetch = cfg.train.prefetch;
            let (_, log) = train_loop(&model, &m, &cfg.train_config(), &opts).map_err(|e| fail(e.into()))?;
            log.save(&layout.train_log()).map_err(|e| fail(e.into()))
        }
        Stage::Eval => {
            let m = load_stage_input(layout, stage, Stage::Augment)?;
            let dir = layout.best_checkpoint();
            if !dir.join(crate::backbone::SIDECAR_FILE).is_file() {
                return Err(PipelineError::StagePrereqMissing { stage, missing: dir });
            }
            let ckpt = Checkpoint::load(&dir).map_err(|e| fail(e.into()))?;
            ckpt.verify(&cfg.train_config().digest(), &cfg.augment.digest())
                .map_err(|e| fail(e.into()))?;
            let model = ckpt.restore().map_err(|e| fail(e.into()))?;
            let mut opts = TrainOptions::new(layout.checkpoint_dir(), cfg.augment.digest());
            opts.parallelism = par;
            let (preds, report) =
                evaluate_split(&model, &m, Split::Test, cfg.train.batch_size, &opts).map_err(|e| fail(e.into()))?;
            write_predictions(&preds, &layout.predictions()).map_err(|e| fail(e.into()))?;
            write_metrics(&report, &layout.metrics()).map_err(&fail)
        }
        Stage::Report => {
            let path = layout.metrics();
            if !path.is_file() {
                return Err(PipelineError::StagePrereqMissing { stage, missing: path });
            }
            let report = read_metrics(&path).map_err(&fail)?;
            let literature = match &cfg.report.literature {
                Some(p) => load_literature(p).map_err(|e| fail(e.into()))?,
                None => bundled_literature(),
            };
            write_report_tables(layout, &[(cfg.model.arch.display_name().to_string(), report)], &literature)
                .map_err(fail)
        }
    }
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<(), StageFailure> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text).map_err(io_failure(path))
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, StageFailure> {
    let text = fs::read_to_string(path).map_err(io_failure(path))?;
    serde_json::from_str(&text)
        .map_err(|e| io_failure(path)(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}

/// Write metrics and comparison tables (CSV and Markdown) under `reports/`.
/// The comparison uses the first report's macro F1.
pub fn write_report_tables(
    layout: &RunLayout,
    reports: &[(String, MetricsReport)],
    literature: &[crate::report::ComparisonRow],
) -> Result<(), StageFailure> {
    let dir = layout.reports_dir();
    fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
    for (format, ext) in [(Format::Csv, "csv"), (Format::Markdown, "md")] {
        let table = emit_metrics_table(reports, format)?;
        let path = dir.join(format!("metrics.{ext}"));
        fs::write(&path, table).map_err(io_failure(&path))?;
        if let Some((name, r)) = reports.first() {
            let cmp = emit_comparison(r.macro_f1, name, literature, format);
            let path = dir.join(format!("comparison.{ext}"));
            fs::write(&path, cmp).map_err(io_failure(&path))?;
        }
    }
    Ok(())
}

/// Run `stages` in pipeline order.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], force: bool) -> Result<RunSummary, PipelineError> {
    let cfg = cfg.clone().resolve()?;
    let layout = RunLayout::new(&cfg.run.out_dir);
    layout
        .create()
        .map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", layout.root.display())))?;
    write_if_changed(&layout.resolved_config(), &cfg.to_toml())
        .map_err(|e| PipelineError::Config(format!("cannot write resolved config: {e}")))?;
    let digest = cfg.digest();
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut summary = RunSummary {
        root: layout.root.clone(),
        stages: Vec::new(),
    };
    for stage in ordered {
        let marker_path = layout.marker(stage);
        let marker = Marker {
            stage: stage.name().to_string(),
            config_digest: digest.clone(),
        };
        let done = fs::read_to_string(&marker_path)
            .ok()
            .and_then(|t| serde_json::from_str::<Marker>(&t).ok())
            .is_some_and(|m| m == marker);
        if done && !force {
            tracing::info!(%stage, "already complete, skipping");
            summary.stages.push((stage, StageOutcome::Skipped));
            continue;
        }
        tracing::info!(%stage, "running");
        run_stage(&cfg, &layout, stage)?;
        let text = serde_json::to_string_pretty(&marker).expect("marker serializes");
        fs::write(&marker_path, text).map_err(|e| stage_err(stage)(io_failure(&marker_path)(e)))?;
        summary.stages.push((stage, StageOutcome::Ran));
    }
    Ok(summary)
}

/// Load a run's train log, if present.
pub fn load_train_log(run_dir: &Path) -> Option<TrainLog> {
    TrainLog::load(&RunLayout::new(run_dir).train_log()).ok()
}
