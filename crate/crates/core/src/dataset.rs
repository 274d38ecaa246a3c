//! Dataset ingestion, stratified splitting and the on-disk manifest.
//!
//! A manifest is a JSON-lines file: one header line carrying the schema
//! version and split/balance bookkeeping, then one line per image record.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Sampling;
use crate::par::Parallelism;
use crate::preprocess::decode_image;
use crate::seed::rng_for;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("source directory does not exist: {0}")]
    MissingDirectory(PathBuf),
    #[error("{} unreadable image(s): {}", paths.len(), display_paths(paths))]
    UnreadableImage { paths: Vec<PathBuf> },
    #[error("path appears more than once across sources: {0}")]
    DuplicatePath(PathBuf),
    #[error("record id is not unique: {0}")]
    DuplicateId(String),
    #[error("source {source_dir} contributes no {label} images")]
    EmptyClass { source_dir: PathBuf, label: ClassLabel },
    #[error("manifest already has a train/test split")]
    AlreadySplit,
    #[error("manifest has no train/test split yet")]
    NoSplit,
    #[error("internal validation set already carved")]
    AlreadyCarved,
    #[error("manifest already contains augmented records")]
    AlreadyAugmented,
    #[error("fraction {0} out of range")]
    FractionOutOfRange(f64),
    #[error("bad label rule: {0}")]
    LabelRule(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest schema version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("manifest truncated: header announces {expected} records, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("manifest invariant violated: {0}")]
    InvariantViolation(String),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassLabel {
    Hem = 0,
    All = 1,
}

impl ClassLabel {
    pub const BOTH: [ClassLabel; 2] = [ClassLabel::Hem, ClassLabel::All];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ClassLabel::Hem),
            1 => Some(ClassLabel::All),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Hem => "HEM",
            ClassLabel::All => "ALL",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HEM" | "0" => Ok(ClassLabel::Hem),
            "ALL" | "1" => Ok(ClassLabel::All),
            other => Err(DatasetError::LabelRule(format!("unknown class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    InternalVal,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
    /// `None` until the train/test split runs.
    pub split: Option<Split>,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_seed: Option<u64>,
}

impl ImageRecord {
    pub fn original(id: impl Into<String>, path: impl Into<PathBuf>, label: ClassLabel) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label,
            split: None,
            origin: Origin::Original,
            parent_id: None,
            aug_seed: None,
        }
    }

    pub fn is_original(&self) -> bool {
        self.origin == Origin::Original
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub path: PathBuf,
    pub hem_count: usize,
    pub all_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionInfo {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub target_m: usize,
    pub global_seed: u64,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub sources: Vec<SourceDescriptor>,
    /// Seed of the train/test split, once assigned.
    pub split_seed: Option<u64>,
    /// Seconds since the Unix epoch at ingestion.
    pub created_at: u64,
    pub test_fraction: Option<f64>,
    pub internal_val: Option<FractionInfo>,
    pub balance: Option<BalanceSummary>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    record_count: usize,
    sources: Vec<SourceDescriptor>,
    split_seed: Option<u64>,
    created_at: u64,
    test_fraction: Option<f64>,
    internal_val: Option<FractionInfo>,
    balance: Option<BalanceSummary>,
}

/// Round half up, with a small guard for products like `25 * 0.3`.
pub fn stratum_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 0.5 + 1e-9).floor() as usize
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, sources: Vec<SourceDescriptor>) -> Self {
        Self {
            records,
            sources,
            split_seed: None,
            created_at: now_secs(),
            test_fraction: None,
            internal_val: None,
            balance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_augmented(&self) -> bool {
        self.records.iter().any(|r| !r.is_original())
    }

    pub fn is_split(&self) -> bool {
        self.split_seed.is_some() || self.records.iter().any(|r| r.split.is_some())
    }

    /// Per-class counts of records matching `split` (any split when `None`)
    /// and `origin` (any origin when `None`), indexed by class code.
    pub fn class_counts(&self, split: Option<Split>, origin: Option<Origin>) -> [usize; 2] {
        let mut counts = [0; 2];
        for r in &self.records {
            if split.is_some_and(|s| r.split != Some(s)) {
                continue;
            }
            if origin.is_some_and(|o| r.origin != o) {
                continue;
            }
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Record-level and cross-record invariants that do not touch the filesystem.
    pub fn check_invariants(&self) -> Result<(), DatasetError> {
        let mut by_id: HashMap<&str, &ImageRecord> = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            if by_id.insert(r.id.as_str(), r).is_some() {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        for r in &self.records {
            match r.origin {
                Origin::Original => {
                    if r.parent_id.is_some() || r.aug_seed.is_some() {
                        return Err(violation(format!(
                            "original record {} carries augmentation provenance",
                            r.id
                        )));
                    }
                }
                Origin::Augmented => {
                    if r.split != Some(Split::Train) {
                        return Err(violation(format!(
                            "augmented record {} is not in TRAIN",
                            r.id
                        )));
                    }
                    let parent = r
                        .parent_id
                        .as_deref()
                        .and_then(|p| by_id.get(p))
                        .ok_or_else(|| {
                            violation(format!("augmented record {} has no valid parent", r.id))
                        })?;
                    if !parent.is_original() || parent.label != r.label {
                        return Err(violation(format!(
                            "augmented record {} has parent {} of different origin or label",
                            r.id, parent.id
                        )));
                    }
                    if parent.split != Some(Split::Train) {
                        return Err(violation(format!(
                            "augmented record {} derives from non-TRAIN record {}",
                            r.id, parent.id
                        )));
                    }
                }
            }
        }
        if let Some(fraction) = self.test_fraction {
            let originals = self.class_counts(None, Some(Origin::Original));
            let test = self.class_counts(Some(Split::Test), None);
            for c in ClassLabel::BOTH {
                let expected = stratum_count(originals[c.index()], fraction);
                if test[c.index()].abs_diff(expected) > 1 {
                    return Err(violation(format!(
                        "{c} has {} TEST records, expected {expected}",
                        test[c.index()]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full validation, including that every referenced file exists.
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.check_invariants()?;
        if let Some(r) = self.records.iter().find(|r| !r.path.exists()) {
            return Err(violation(format!(
                "record {} points at missing file {}",
                r.id,
                r.path.display()
            )));
        }
        Ok(())
    }
}

fn violation(msg: String) -> DatasetError {
    DatasetError::InvariantViolation(msg)
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Maps directory names to class labels.
///
/// Exact (case-insensitive) overrides are consulted first; otherwise a name
/// containing "hem" is HEM and one containing "all" is ALL. The deepest
/// matching directory below the source root wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    #[serde(default)]
    pub labels: BTreeMap<String, ClassLabel>,
    #[serde(default = "yes")]
    pub substring_fallback: bool,
}

fn yes() -> bool {
    true
}

impl LabelRule {
    pub fn c_nmc() -> Self {
        Self {
            labels: BTreeMap::new(),
            substring_fallback: true,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DatasetError> {
        let mut rule: LabelRule =
            toml::from_str(text).map_err(|e| DatasetError::LabelRule(e.to_string()))?;
        rule.labels = rule
            .labels
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        Ok(rule)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn classify_dir(&self, name: &str) -> Option<ClassLabel> {
        let lower = name.to_lowercase();
        if let Some(&label) = self.labels.get(&lower) {
            return Some(label);
        }
        if !self.substring_fallback {
            return None;
        }
        if lower.contains("hem") {
            Some(ClassLabel::Hem)
        } else if lower.contains("all") {
            Some(ClassLabel::All)
        } else {
            None
        }
    }

    /// Label for a file given its path relative to the source root.
    pub fn classify(&self, relative: &Path) -> Option<ClassLabel> {
        let dirs: Vec<_> = relative
            .parent()
            .map(|p| p.components().collect())
            .unwrap_or_default();
        dirs.iter()
            .rev()
            .find_map(|c| self.classify_dir(&c.as_os_str().to_string_lossy()))
    }
}

pub const DEFAULT_EXTENSIONS: [&str; 5] = ["bmp", "png", "jpg", "jpeg", "tif"];

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn sanitize(relative: &Path) -> String {
    relative
        .with_extension("")
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || ch == '-' || ch == '.' {
                ch
            } else {
                '_'
            }
        })
        .collect()
}

/// Scan source directories and merge them into one manifest of originals.
pub fn ingest(
    source_dirs: &[PathBuf],
    rule: &LabelRule,
    extensions: &[&str],
    par: Parallelism,
) -> Result<DatasetManifest, DatasetError> {
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    let mut sources = Vec::new();
    for (idx, src) in source_dirs.iter().enumerate() {
        if !src.is_dir() {
            return Err(DatasetError::MissingDirectory(src.clone()));
        }
        let root = src.canonicalize().map_err(io_err(src))?;
        let mut files = Vec::new();
        walk(&root, &mut files)?;
        let mut counts = [0usize; 2];
        for file in files {
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_lowercase())
                .unwrap_or_default();
            if !extensions.iter().any(|e| *e == ext) {
                continue;
            }
            let relative = file.strip_prefix(&root).unwrap_or(&file).to_path_buf();
            let Some(label) = rule.classify(&relative) else {
                tracing::debug!(path = %file.display(), "no label rule matches; skipped");
                continue;
            };
            if !seen.insert(file.clone()) {
                return Err(DatasetError::DuplicatePath(file));
            }
            counts[label.index()] += 1;
            let id = format!("s{idx}_{}", sanitize(&relative));
            candidates.push(ImageRecord::original(id, file, label));
        }
        for label in ClassLabel::BOTH {
            if counts[label.index()] == 0 {
                return Err(DatasetError::EmptyClass {
                    source_dir: src.clone(),
                    label,
                });
            }
        }
        sources.push(SourceDescriptor {
            path: root,
            hem_count: counts[0],
            all_count: counts[1],
        });
    }

    let unreadable: Vec<PathBuf> = par
        .map(&candidates, |r| decode_image(&r.path).err().map(|_| r.path.clone()))
        .into_iter()
        .flatten()
        .collect();
    if !unreadable.is_empty() {
        return Err(DatasetError::UnreadableImage { paths: unreadable });
    }

    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = candidates.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DatasetError::DuplicateId(w[0].id.clone()));
    }
    Ok(DatasetManifest::new(candidates, sources))
}

fn check_fraction(f: f64, allow_zero: bool) -> Result<(), DatasetError> {
    let lower_ok = if allow_zero { f >= 0.0 } else { f > 0.0 };
    if lower_ok && f < 1.0 {
        Ok(())
    } else {
        Err(DatasetError::FractionOutOfRange(f))
    }
}

/// Select `count` ids per class: sort ids, shuffle with a class-keyed stream,
/// take the prefix. Independent of record order in the input.
fn pick_stratum<'a>(
    mut ids: Vec<&'a str>,
    count: usize,
    seed: u64,
    label: &str,
    class: ClassLabel,
) -> HashSet<&'a str> {
    ids.sort_unstable();
    let mut rng = rng_for(seed, label, class.code() as u64);
    ids.shuffle(&mut rng);
    ids.into_iter().take(count).collect()
}

/// Per-class partition of originals into TRAIN and TEST.
pub fn stratified_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    check_fraction(test_fraction, false)?;
    if manifest.is_split() {
        return Err(DatasetError::AlreadySplit);
    }
    if manifest.has_augmented() {
        return Err(DatasetError::AlreadyAugmented);
    }
    let mut test_ids: HashSet<String> = HashSet::new();
    for class in ClassLabel::BOTH {
        let ids: Vec<&str> = manifest
            .records
            .iter()
            .filter(|r| r.label == class)
            .map(|r| r.id.as_str())
            .collect();
        let k = stratum_count(ids.len(), test_fraction);
        test_ids.extend(
            pick_stratum(ids, k, seed, "split", class)
                .into_iter()
                .map(str::to_owned),
        );
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Some(if test_ids.contains(&r.id) {
            Split::Test
        } else {
            Split::Train
        });
    }
    out.records.sort_by(|a, b| a.id.cmp(&b.id));
    out.split_seed = Some(seed);
    out.test_fraction = Some(test_fraction);
    Ok(out)
}

/// Move a stratified fraction of TRAIN originals into INTERNAL_VAL.
pub fn carve_internal_val(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    check_fraction(val_fraction, true)?;
    if !manifest.is_split() {
        return Err(DatasetError::NoSplit);
    }
    if manifest.internal_val.is_some() || manifest.records_in(Split::InternalVal).next().is_some() {
        return Err(DatasetError::AlreadyCarved);
    }
    if manifest.has_augmented() {
        return Err(DatasetError::AlreadyAugmented);
    }
    if val_fraction == 0.0 {
        tracing::warn!("validation fraction is 0; manifest left unchanged");
        return Ok(manifest.clone());
    }
    let mut val_ids: HashSet<String> = HashSet::new();
    for class in ClassLabel::BOTH {
        let ids: Vec<&str> = manifest
            .records_in(Split::Train)
            .filter(|r| r.label == class && r.is_original())
            .map(|r| r.id.as_str())
            .collect();
        let k = stratum_count(ids.len(), val_fraction);
        val_ids.extend(
            pick_stratum(ids, k, seed, "carve-val", class)
                .into_iter()
                .map(str::to_owned),
        );
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        if val_ids.contains(&r.id) {
            r.split = Some(Split::InternalVal);
        }
    }
    out.internal_val = Some(FractionInfo {
        fraction: val_fraction,
        seed,
    });
    Ok(out)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        record_count: manifest.records.len(),
        sources: manifest.sources.clone(),
        split_seed: manifest.split_seed,
        created_at: manifest.created_at,
        test_fraction: manifest.test_fraction,
        internal_val: manifest.internal_val,
        balance: manifest.balance,
    };
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        let mut write_line = |value: String| -> Result<(), DatasetError> {
            w.write_all(value.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(io_err(&tmp))
        };
        write_line(serde_json::to_string(&header).expect("header serializes"))?;
        for r in &manifest.records {
            write_line(serde_json::to_string(r).expect("record serializes"))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parse a manifest and check record invariants (file existence is left to
/// [`DatasetManifest::validate`]).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(io_err(path))?
        .ok_or(DatasetError::Parse {
            line: 1,
            reason: "empty file".into(),
        })?;
    let version: serde_json::Value = serde_json::from_str(&first).map_err(|e| DatasetError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    let found = version
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(DatasetError::SchemaVersionMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let header: Header = serde_json::from_value(version).map_err(|e| DatasetError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut records = Vec::with_capacity(header.record_count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 2,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    if records.len() != header.record_count {
        return Err(DatasetError::Truncated {
            expected: header.record_count,
            found: records.len(),
        });
    }
    let manifest = DatasetManifest {
        records,
        sources: header.sources,
        split_seed: header.split_seed,
        created_at: header.created_at,
        test_fraction: header.test_fraction,
        internal_val: header.internal_val,
        balance: header.balance,
    };
    manifest.check_invariants()?;
    Ok(manifest)
}
