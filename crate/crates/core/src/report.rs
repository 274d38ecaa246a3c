//! Result tables: per-model metrics and a comparison against published F1
//! scores.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsReport;

/// Published comparison rows bundled with the crate.
pub const BUNDLED_LITERATURE: &str = include_str!("../data/literature.toml");
pub const THIS_RUN_LABEL: &str = "This run";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed literature file: {0}")]
    MalformedLiteratureFile(String),
    #[error("no reports to tabulate")]
    NoReports,
    #[error("unknown table format {0:?} (expected csv or md)")]
    UnknownFormat(String),
    #[error("cannot parse metrics table: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Csv,
    Markdown,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

/// A ratio as a percentage with two decimals, ties to even.
pub fn percent(ratio: f64) -> String {
    let hundredths = (ratio * 10_000.0).round_ties_even();
    format!("{:.2}", hundredths / 100.0)
}

fn opt_percent(ratio: Option<f64>) -> String {
    ratio.map_or_else(|| "n/a".to_string(), percent)
}

const METRIC_COLUMNS: [&str; 12] = [
    "model",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auc",
    "precision_all",
    "recall_all",
    "f1_all",
    "precision_hem",
    "recall_hem",
    "f1_hem",
];

/// Percent strings for one report in [`METRIC_COLUMNS`] order (after the
/// model name). Precision, recall and F1 are macro averages; the per-class
/// columns follow.
fn metric_cells(r: &MetricsReport) -> Vec<String> {
    let (hem, all) = (0, 1);
    vec![
        percent(r.accuracy),
        percent(r.macro_precision),
        percent(r.macro_recall),
        percent(r.macro_f1),
        opt_percent(r.auc),
        percent(r.precision_per_class[all]),
        percent(r.recall_per_class[all]),
        percent(r.f1_per_class[all]),
        percent(r.precision_per_class[hem]),
        percent(r.recall_per_class[hem]),
        percent(r.f1_per_class[hem]),
    ]
}

fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn to_markdown(header: &[&str], rows: &[Vec<String>], numeric_from: usize) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count().max(3)).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i >= numeric_from {
                    format!("{c:>w$}", w = widths[i])
                } else {
                    format!("{c:<w$}", w = widths[i])
                }
            })
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    let rule: Vec<String> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if i >= numeric_from {
                format!("{}:", "-".repeat(w - 1))
            } else {
                "-".repeat(w)
            }
        })
        .collect();
    out.push_str(&format!("| {} |\n", rule.join(" | ")));
    for row in rows {
        out.push_str(&line(row.clone()));
    }
    out
}

/// One row per `(model name, report)`, in input order.
pub fn emit_metrics_table(reports: &[(String, MetricsReport)], format: Format) -> Result<String, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.clone()];
            row.extend(metric_cells(r));
            row
        })
        .collect();
    Ok(match format {
        Format::Csv => to_csv(&METRIC_COLUMNS, &rows),
        Format::Markdown => to_markdown(&METRIC_COLUMNS, &rows, 1),
    })
}

/// A metrics row read back from CSV; values are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMetricsRow {
    pub model: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub per_class: [[f64; 3]; 2],
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<ParsedMetricsRow>, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| ReportError::Parse(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != METRIC_COLUMNS {
        return Err(ReportError::Parse(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ReportError::Parse(e.to_string()))?;
        let num = |i: usize| -> Result<f64, ReportError> {
            rec[i]
                .parse()
                .map_err(|_| ReportError::Parse(format!("column {} value {:?}", METRIC_COLUMNS[i], &rec[i])))
        };
        out.push(ParsedMetricsRow {
            model: rec[0].to_string(),
            accuracy: num(1)?,
            precision: num(2)?,
            recall: num(3)?,
            f1: num(4)?,
            auc: if &rec[5] == "n/a" { None } else { Some(num(5)?) },
            per_class: [[num(9)?, num(10)?, num(11)?], [num(6)?, num(7)?, num(8)?]],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RowSource {
    Literature,
    ThisRun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method_name: String,
    pub description: String,
    pub f1_percent: f64,
    /// The F1 exactly as it should be printed.
    pub f1_text: String,
    pub source: RowSource,
}

#[derive(Deserialize)]
struct LiteratureFile {
    #[serde(default)]
    row: Vec<LiteratureEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LiteratureEntry {
    method: String,
    description: String,
    f1: String,
}

pub fn parse_literature(text: &str) -> Result<Vec<ComparisonRow>, ReportError> {
    let file: LiteratureFile = toml::from_str(text).map_err(|e| ReportError::MalformedLiteratureFile(e.to_string()))?;
    file.row
        .into_iter()
        .map(|e| {
            let f1: f64 = e.f1.trim().parse().map_err(|_| {
                ReportError::MalformedLiteratureFile(format!("{}: f1 {:?} is not a number", e.method, e.f1))
            })?;
            if !(0.0..=100.0).contains(&f1) {
                return Err(ReportError::MalformedLiteratureFile(format!(
                    "{}: f1 {f1} outside [0, 100]",
                    e.method
                )));
            }
            Ok(ComparisonRow {
                method_name: e.method,
                description: e.description,
                f1_percent: f1,
                f1_text: e.f1,
                source: RowSource::Literature,
            })
        })
        .collect()
}

pub fn bundled_literature() -> Vec<ComparisonRow> {
    parse_literature(BUNDLED_LITERATURE).expect("bundled literature file is well formed")
}

pub fn load_literature(path: &Path) -> Result<Vec<ComparisonRow>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_literature(&text)
}

/// Literature rows plus this run's row, sorted by F1 descending. Ties keep
/// literature rows ahead.
pub fn comparison_rows(own_f1: f64, description: &str, literature: &[ComparisonRow]) -> Vec<ComparisonRow> {
    if literature.is_empty() {
        tracing::warn!("comparison table has no literature rows");
    }
    let own_text = percent(own_f1);
    let mut rows = literature.to_vec();
    rows.push(ComparisonRow {
        method_name: THIS_RUN_LABEL.to_string(),
        description: description.to_string(),
        f1_percent: own_text.parse().expect("formatted number"),
        f1_text: own_text,
        source: RowSource::ThisRun,
    });
    rows.sort_by(|a, b| b.f1_percent.total_cmp(&a.f1_percent));
    rows
}

/// Render the comparison table. In Markdown the run's row is bold; CSV
/// carries a `source` column instead.
pub fn emit_comparison(own_f1: f64, description: &str, literature: &[ComparisonRow], format: Format) -> String {
    let rows = comparison_rows(own_f1, description, literature);
    match format {
        Format::Csv => {
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let source = match r.source {
                        RowSource::Literature => "LITERATURE",
                        RowSource::ThisRun => "THIS_RUN",
                    };
                    vec![r.method_name.clone(), r.description.clone(), r.f1_text.clone(), source.into()]
                })
                .collect();
            to_csv(&["method", "description", "f1", "source"], &cells)
        }
        Format::Markdown => {
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| match r.source {
                    RowSource::Literature => vec![r.method_name.clone(), r.description.clone(), r.f1_text.clone()],
                    RowSource::ThisRun => vec![
                        format!("**{}**", r.method_name),
                        format!("**{}**", r.description),
                        format!("**{}**", r.f1_text),
                    ],
                })
                .collect();
            to_markdown(&["Method", "Description", "F1-score"], &cells, 2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ClassCounts;

    fn report(x: f64) -> MetricsReport {
        MetricsReport {
            n: 10,
            counts: [ClassCounts::default(); 2],
            accuracy: x,
            precision_per_class: [x; 2],
            recall_per_class: [x; 2],
            f1_per_class: [x; 2],
            macro_precision: x,
            macro_recall: x,
            macro_f1: x,
            auc: Some(x),
        }
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.9430), "94.30");
        assert_eq!(percent(0.92024), "92.02");
        assert_eq!(percent(0.0), "0.00");
        assert_eq!(percent(2.0 / 3.0), "66.67");
    }

    #[test]
    fn perfect_row_is_all_hundreds() {
        let csv = emit_metrics_table(&[("toy".into(), report(1.0))], Format::Csv).unwrap();
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line, format!("toy{}", ",100.00".repeat(11)));
    }

    #[test]
    fn rows_keep_input_order() {
        let reports = vec![("b".to_string(), report(0.5)), ("a".to_string(), report(0.9))];
        let parsed = parse_metrics_csv(&emit_metrics_table(&reports, Format::Csv).unwrap()).unwrap();
        assert_eq!(parsed.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        let md = emit_metrics_table(&reports, Format::Markdown).unwrap();
        assert!(md.find("| b ").unwrap() < md.find("| a ").unwrap());
    }

    #[test]
    fn missing_auc_prints_na() {
        let mut r = report(0.5);
        r.auc = None;
        let csv = emit_metrics_table(&[("m".into(), r)], Format::Csv).unwrap();
        assert_eq!(parse_metrics_csv(&csv).unwrap()[0].auc, None);
    }

    #[test]
    fn empty_reports_rejected() {
        assert!(matches!(emit_metrics_table(&[], Format::Csv), Err(ReportError::NoReports)));
    }

    #[test]
    fn bundled_file_has_twelve_rows() {
        let rows = bundled_literature();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[0].method_name, "VGG16 (from scratch)");
        assert_eq!(rows[0].f1_text, "92.60");
        assert_eq!(rows[11].f1_text, "81.79");
    }

    #[test]
    fn own_row_ranking() {
        let lit = bundled_literature();
        let top = comparison_rows(0.9430, "EfficientNet-B3", &lit);
        assert_eq!(top[0].source, RowSource::ThisRun);
        assert_eq!(top[0].f1_text, "94.30");
        let bottom = comparison_rows(0.0, "x", &lit);
        assert_eq!(bottom.last().unwrap().source, RowSource::ThisRun);
        let alone = comparison_rows(0.5, "x", &[]);
        assert_eq!(alone.len(), 1);
    }

    #[test]
    fn malformed_literature() {
        for bad in [
            "[[row]]\nmethod = \"a\"\ndescription = \"b\"\nf1 = \"high\"\n",
            "[[row]]\nmethod = \"a\"\nf1 = \"1.0\"\n",
            "[[row]]\nmethod = \"a\"\ndescription = \"b\"\nf1 = \"101\"\n",
            "not toml [",
        ] {
            assert!(matches!(parse_literature(bad), Err(ReportError::MalformedLiteratureFile(_))), "{bad}");
        }
    }

    #[test]
    fn markdown_highlights_own_row() {
        let md = emit_comparison(0.95, "EfficientNet-B3", &bundled_literature(), Format::Markdown);
        let second = md.lines().nth(2).unwrap();
        assert!(second.contains("**This run**") && second.contains("**95.00**"));
    }
}
