use leukopipe::dataset::ClassLabel;
use leukopipe::metrics::{evaluate, MetricsReport, PredictionSet};
use leukopipe::report::{
    bundled_literature, comparison_rows, emit_comparison, emit_metrics_table, parse_literature, parse_metrics_csv,
    percent, Format, ReportError, RowSource, THIS_RUN_LABEL,
};
use proptest::prelude::*;

const PUBLISHED: [(&str, &str, &str); 12] = [
    ("VGG16 (from scratch)", "Train a VGG16 architecture from scratch", "92.60"),
    ("ResNet (TL + NC)", "Transfer learning ResNets with neighborhood-correction", "92.50"),
    ("VGG16 (TL)", "Transfer learning with a VGG16 architecture", "91.70"),
    ("DeepMEN", "Deep multi-model ensemble network (CNNs)", "90.30"),
    ("MobileNetV2 (TL)", "Transfer learning with a MobileNetV2 architecture", "89.47"),
    ("ResNeXt50 (scratch)", "Training from scratch a ResNeXt50 architecture", "87.89"),
    ("CNN+RNN (TL)", "TL with convolutional and recurrent neural networks", "87.58"),
    ("ResNet18 (TL)", "Transfer learning with a ResNet18 architecture", "87.46"),
    (
        "Multiple Architectures",
        "Training InceptionV3, DenseNet, InceptionResNetV2 from scratch",
        "86.74",
    ),
    ("ResNeXt50/101 (scratch)", "Training from scratch ResNeXt50 and ResNeXt101", "85.70"),
    ("Inception + ResNet (TL)", "Transfer learning with Inception and ResNets", "84.00"),
    ("ResNet + SENet (TL)", "Transfer learning with ResNets and SENets", "81.79"),
];

fn report(labels: &[bool], scores: &[f64]) -> MetricsReport {
    let set = PredictionSet::from_scores(
        (0..labels.len()).map(|i| i.to_string()).collect(),
        labels
            .iter()
            .map(|&b| if b { ClassLabel::All } else { ClassLabel::Hem })
            .collect(),
        scores.to_vec(),
    )
    .unwrap();
    evaluate(&set).unwrap()
}

#[test]
fn bundled_literature_is_the_published_table() {
    let rows = bundled_literature();
    assert_eq!(rows.len(), PUBLISHED.len());
    for (row, (method, desc, f1)) in rows.iter().zip(PUBLISHED) {
        assert_eq!(row.method_name, method);
        assert_eq!(row.description, desc);
        assert_eq!(row.f1_text, f1);
        assert_eq!(row.source, RowSource::Literature);
    }
}

#[test]
fn comparison_places_own_row_by_f1() {
    let lit = bundled_literature();
    let rows = comparison_rows(0.943, "EfficientNet-B3", &lit);
    assert_eq!(rows[0].method_name, THIS_RUN_LABEL);
    assert_eq!(rows[0].f1_text, "94.30");

    let rows = comparison_rows(0.9170, "mid", &lit);
    let own = rows.iter().position(|r| r.source == RowSource::ThisRun).unwrap();
    assert_eq!(rows[own - 1].method_name, "VGG16 (TL)", "literature wins ties");
    assert!(rows.windows(2).all(|w| w[0].f1_percent >= w[1].f1_percent));

    let md = emit_comparison(0.5, "weak", &lit, Format::Markdown);
    assert!(md.lines().last().unwrap().contains("**50.00**"));
    let csv = emit_comparison(0.5, "weak", &lit, Format::Csv);
    assert!(csv.starts_with("method,description,f1,source\n"));
    assert_eq!(csv.matches("LITERATURE").count(), 12);
    assert!(csv.contains("\"Training InceptionV3, DenseNet, InceptionResNetV2 from scratch\""));
}

#[test]
fn percent_rounds_half_to_even() {
    assert_eq!(percent(0.943), "94.30");
    assert_eq!(percent(0.12345), "12.34");
    assert_eq!(percent(0.12355), "12.36");
    assert_eq!(percent(1.0), "100.00");
    assert_eq!(percent(0.0), "0.00");
}

#[test]
fn literature_errors() {
    assert!(matches!(
        parse_literature("[[row]]\nmethod = \"x\"\ndescription = \"y\"\nf1 = \"abc\"\n"),
        Err(ReportError::MalformedLiteratureFile(_))
    ));
    assert!(matches!(
        parse_literature("[[row]]\nmethod = \"x\"\ndescription = \"y\"\nf1 = \"120\"\n"),
        Err(ReportError::MalformedLiteratureFile(_))
    ));
    assert!(matches!(
        parse_literature("[[row]]\nmethod = \"x\"\nf1 = \"12\"\n"),
        Err(ReportError::MalformedLiteratureFile(_))
    ));
    assert!(parse_literature("").unwrap().is_empty());
    assert!(matches!(emit_metrics_table(&[], Format::Csv), Err(ReportError::NoReports)));
    assert!("tsv".parse::<Format>().is_err());
}

#[test]
fn missing_auc_prints_placeholder() {
    let r = report(&[true, true], &[0.9, 0.8]);
    let csv = emit_metrics_table(&[("m".into(), r)], Format::Csv).unwrap();
    assert!(csv.contains(",n/a,"));
    assert_eq!(parse_metrics_csv(&csv).unwrap()[0].auc, None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec(prop::collection::vec((any::<bool>(), 0.0f64..1.0), 2..40), 1..4)) {
        let reports: Vec<(String, MetricsReport)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let labels: Vec<bool> = r.iter().map(|x| x.0).collect();
                let scores: Vec<f64> = r.iter().map(|x| x.1).collect();
                (format!("model, {i}"), report(&labels, &scores))
            })
            .collect();
        let csv = emit_metrics_table(&reports, Format::Csv).unwrap();
        let parsed = parse_metrics_csv(&csv).unwrap();
        prop_assert_eq!(parsed.len(), reports.len());
        let close = |pct: f64, ratio: f64| (pct - ratio * 100.0).abs() <= 0.005 + 1e-9;
        for (p, (name, r)) in parsed.iter().zip(&reports) {
            prop_assert_eq!(&p.model, name);
            prop_assert!(close(p.accuracy, r.accuracy));
            prop_assert!(close(p.precision, r.macro_precision));
            prop_assert!(close(p.recall, r.macro_recall));
            prop_assert!(close(p.f1, r.macro_f1));
            prop_assert_eq!(p.auc.is_some(), r.auc.is_some());
            for k in 0..2 {
                prop_assert!(close(p.per_class[k][2], r.f1_per_class[k]));
                prop_assert!(close(p.per_class[k][0], r.precision_per_class[k]));
            }
        }
        let md = emit_metrics_table(&reports, Format::Markdown).unwrap();
        prop_assert_eq!(md.lines().count(), reports.len() + 2);
    }
}
