//! Classification metrics computed from first principles.
//!
//! Precision, recall and F1 are per class (one-vs-rest) and macro-averaged
//! over both classes. AUC is the Mann-Whitney rank statistic with
//! half-credit for ties; [`auc_trapezoid`] integrates the ROC curve directly
//! and must agree with it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClassLabel;

/// Predicted label is ALL iff P(ALL) >= this.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions")]
    EmptyInput,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("AUC undefined: only one class present")]
    SingleClassOnly,
    #[error("prediction file {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn predict_label(p_all: f64) -> ClassLabel {
    if p_all >= DECISION_THRESHOLD {
        ClassLabel::All
    } else {
        ClassLabel::Hem
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub labels: Vec<ClassLabel>,
    /// P(ALL) per item.
    pub scores: Vec<f64>,
    pub predicted: Vec<ClassLabel>,
}

impl PredictionSet {
    /// Build from scores, deriving predicted labels with the 0.5 threshold.
    pub fn from_scores(
        ids: Vec<String>,
        labels: Vec<ClassLabel>,
        scores: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        let predicted = scores.iter().map(|&s| predict_label(s)).collect();
        let set = Self {
            ids,
            labels,
            scores,
            predicted,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let n = self.labels.len();
        if n == 0 {
            return Err(MetricsError::EmptyInput);
        }
        if self.ids.len() != n || self.scores.len() != n || self.predicted.len() != n {
            return Err(MetricsError::LengthMismatch(format!(
                "ids {}, labels {n}, scores {}, predicted {}",
                self.ids.len(),
                self.scores.len(),
                self.predicted.len()
            )));
        }
        if let Some(&s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(MetricsError::ScoreOutOfRange(s));
        }
        Ok(())
    }
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// 2x2 confusion matrix indexed `[true][predicted]` by class code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: [[usize; 2]; 2],
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.matrix[0][0] + self.matrix[1][1]
    }

    pub fn one_vs_rest(&self, class: ClassLabel) -> ClassCounts {
        let c = class.index();
        let o = 1 - c;
        ClassCounts {
            tp: self.matrix[c][c],
            fn_: self.matrix[c][o],
            fp: self.matrix[o][c],
            tn: self.matrix[o][o],
        }
    }
}

pub fn confusion(preds: &PredictionSet) -> Result<Confusion, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if preds.predicted.len() != preds.labels.len() {
        return Err(MetricsError::LengthMismatch("labels vs predicted".into()));
    }
    let mut m = Confusion::default();
    for (t, p) in preds.labels.iter().zip(&preds.predicted) {
        m.matrix[t.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub per_class: [ClassMetrics; 2],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize, what: &str, class: ClassLabel) -> f64 {
    if den == 0 {
        tracing::warn!("{what} undefined for {class} (zero denominator); using 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_metrics(counts: ClassCounts, class: ClassLabel) -> ClassMetrics {
    let precision = ratio(counts.tp, counts.tp + counts.fp, "precision", class);
    let recall = ratio(counts.tp, counts.tp + counts.fn_, "recall", class);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
    }
}

pub fn macro_metrics(c: &Confusion) -> MacroMetrics {
    let per_class = ClassLabel::BOTH.map(|class| class_metrics(c.one_vs_rest(class), class));
    let mean = |f: fn(&ClassMetrics) -> f64| (f(&per_class[0]) + f(&per_class[1])) / 2.0;
    MacroMetrics {
        accuracy: if c.n() == 0 {
            0.0
        } else {
            c.correct() as f64 / c.n() as f64
        },
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

fn check_scores(labels: &[ClassLabel], scores: &[f64]) -> Result<(usize, usize), MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch("labels vs scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == ClassLabel::All).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClassOnly);
    }
    Ok((n_pos, n_neg))
}

/// Mann-Whitney AUC: fraction of (ALL, HEM) pairs where the ALL item scores
/// higher, ties counted as one half. Uses mid-ranks, O(n log n).
pub fn auc(labels: &[ClassLabel], scores: &[f64]) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == ClassLabel::All {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the empirical ROC curve by the trapezoid rule, sweeping the
/// threshold down through each distinct score.
pub fn auc_trapezoid(labels: &[ClassLabel], scores: &[f64]) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == ClassLabel::All {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// One-vs-rest counts, by class code.
    pub counts: [ClassCounts; 2],
    pub accuracy: f64,
    pub precision_per_class: [f64; 2],
    pub recall_per_class: [f64; 2],
    pub f1_per_class: [f64; 2],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
}

pub fn evaluate(preds: &PredictionSet) -> Result<MetricsReport, MetricsError> {
    preds.validate()?;
    let c = confusion(preds)?;
    let m = macro_metrics(&c);
    let auc = match auc(&preds.labels, &preds.scores) {
        Ok(v) => Some(v),
        Err(MetricsError::SingleClassOnly) => {
            tracing::warn!("AUC undefined: single class in evaluation set");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        n: c.n(),
        counts: ClassLabel::BOTH.map(|k| c.one_vs_rest(k)),
        accuracy: m.accuracy,
        precision_per_class: m.per_class.map(|x| x.precision),
        recall_per_class: m.per_class.map(|x| x.recall),
        f1_per_class: m.per_class.map(|x| x.f1),
        macro_precision: m.macro_precision,
        macro_recall: m.macro_recall,
        macro_f1: m.macro_f1,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    label: ClassLabel,
    p_all: f64,
}

/// Line-delimited `{id, label, p_all}` records.
pub fn write_predictions(preds: &PredictionSet, path: &Path) -> Result<(), MetricsError> {
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for i in 0..preds.len() {
        let line = PredictionLine {
            id: preds.ids[i].clone(),
            label: preds.labels[i],
            p_all: preds.scores[i],
        };
        serde_json::to_writer(&mut out, &line).expect("prediction serializes");
        out.write_all(b"\n").map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet, MetricsError> {
    let file = fs::File::open(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionLine = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        ids.push(rec.id);
        labels.push(rec.label);
        scores.push(rec.p_all);
    }
    PredictionSet::from_scores(ids, labels, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{All, Hem};

    fn set(labels: &[u32], predicted: &[u32]) -> PredictionSet {
        let labels: Vec<_> = labels.iter().map(|&c| ClassLabel::from_code(c).unwrap()).collect();
        let predicted: Vec<_> = predicted.iter().map(|&c| ClassLabel::from_code(c).unwrap()).collect();
        let scores = predicted.iter().map(|p| if *p == All { 0.9 } else { 0.1 }).collect();
        PredictionSet {
            ids: (0..labels.len()).map(|i| i.to_string()).collect(),
            labels,
            scores,
            predicted,
        }
    }

    #[test]
    fn four_item_confusion() {
        let c = confusion(&set(&[0, 1, 1, 0], &[0, 1, 0, 0])).unwrap();
        assert_eq!(
            c.one_vs_rest(All),
            ClassCounts { tp: 1, fn_: 1, fp: 0, tn: 2 }
        );
        assert_eq!(c.one_vs_rest(All).total(), 4);
        assert_eq!(c.one_vs_rest(Hem).total(), 4);
    }

    #[test]
    fn four_item_macro() {
        let m = macro_metrics(&confusion(&set(&[0, 1, 1, 0], &[0, 1, 0, 0])).unwrap());
        assert_eq!(m.accuracy, 0.75);
        let all = m.per_class[All.index()];
        assert_eq!(all.precision, 1.0);
        assert_eq!(all.recall, 0.5);
        assert!((all.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let c = confusion(&set(&[0, 1, 1, 0, 1], &[0, 1, 1, 0, 1])).unwrap();
        for k in ClassLabel::BOTH {
            let cc = c.one_vs_rest(k);
            assert_eq!((cc.fp, cc.fn_), (0, 0));
        }
        let m = macro_metrics(&c);
        assert_eq!((m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_predicted_positive_on_negatives() {
        let c = confusion(&set(&[0, 0, 0], &[1, 1, 1])).unwrap();
        let cc = c.one_vs_rest(All);
        assert_eq!((cc.fp, cc.tp), (3, 0));
    }

    #[test]
    fn never_predicting_all_gives_zero() {
        let m = macro_metrics(&confusion(&set(&[0, 1, 1, 0], &[0, 0, 0, 0])).unwrap());
        assert_eq!(m.per_class[All.index()].precision, 0.0);
        assert_eq!(m.per_class[All.index()].f1, 0.0);
    }

    #[test]
    fn empty_input() {
        assert!(matches!(confusion(&set(&[], &[])), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[All, Hem], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[All, Hem, All, Hem], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[All, All, Hem, Hem], &[0.8, 0.4, 0.6, 0.2]).unwrap(), 0.75);
        assert_eq!(auc_trapezoid(&[All, All, Hem, Hem], &[0.8, 0.4, 0.6, 0.2]).unwrap(), 0.75);
        assert!(matches!(auc(&[All, All], &[0.1, 0.2]), Err(MetricsError::SingleClassOnly)));
    }

    #[test]
    fn threshold_tie_goes_to_all() {
        assert_eq!(predict_label(0.5), All);
        assert_eq!(predict_label(0.4999), Hem);
    }

    #[test]
    fn report_has_no_auc_for_single_class() {
        let p = PredictionSet::from_scores(vec!["a".into(), "b".into()], vec![Hem, Hem], vec![0.2, 0.7]).unwrap();
        let r = evaluate(&p).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn scores_validated() {
        let r = PredictionSet::from_scores(vec!["a".into()], vec![Hem], vec![1.2]);
        assert!(matches!(r, Err(MetricsError::ScoreOutOfRange(_))));
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let p = PredictionSet::from_scores(
            vec!["x".into(), "y".into(), "z".into()],
            vec![All, Hem, All],
            vec![0.25, 0.5, 0.999],
        )
        .unwrap();
        write_predictions(&p, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), p);
    }
}
