mod common;

use leukopipe::dataset::ClassLabel;
use leukopipe::metrics::{auc, auc_trapezoid, evaluate, read_predictions, write_predictions, PredictionSet};
use proptest::prelude::*;

use common::oracle;

fn label(b: bool) -> ClassLabel {
    if b {
        ClassLabel::All
    } else {
        ClassLabel::Hem
    }
}

fn set(labels: &[bool], scores: &[f64]) -> PredictionSet {
    PredictionSet::from_scores(
        (0..labels.len()).map(|i| format!("r{i}")).collect(),
        labels.iter().map(|&b| label(b)).collect(),
        scores.to_vec(),
    )
    .unwrap()
}

fn cases() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.25, 0.5, 0.6, 0.75, 0.9, 1.0]), n),
        )
    })
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&b| b) && labels.iter().any(|&b| !b)
}

#[test]
fn hand_computed_example() {
    // 3 ALL, 2 HEM; one ALL missed, one HEM called ALL.
    let p = set(&[true, true, true, false, false], &[0.9, 0.8, 0.2, 0.7, 0.1]);
    let r = evaluate(&p).unwrap();
    assert!((r.accuracy - 0.6).abs() < 1e-12);
    assert!((r.precision_per_class[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.recall_per_class[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.precision_per_class[0] - 0.5).abs() < 1e-12);
    assert!((r.recall_per_class[0] - 0.5).abs() < 1e-12);
    assert!((r.macro_f1 - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
    // pairs (ALL, HEM): 0.9>0.7, 0.9>0.1, 0.8>0.7, 0.8>0.1, 0.2<0.7, 0.2>0.1
    assert!((r.auc.unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn threshold_is_inclusive_for_all() {
    let p = set(&[true, false], &[0.5, 0.4999]);
    assert_eq!(p.predicted, vec![ClassLabel::All, ClassLabel::Hem]);
}

#[test]
fn single_class_has_no_auc() {
    let r = evaluate(&set(&[true, true, true], &[0.9, 0.2, 0.6])).unwrap();
    assert!(r.auc.is_none());
    assert_eq!(r.precision_per_class[0], 0.0);
}

#[test]
fn predictions_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.jsonl");
    let p = set(&[true, false, true], &[0.123456789, 0.5, 1.0 / 3.0]);
    write_predictions(&p, &path).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), p);
}

#[test]
fn mismatched_lengths_rejected() {
    assert!(PredictionSet::from_scores(vec!["a".into()], vec![ClassLabel::Hem, ClassLabel::All], vec![0.1, 0.2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force((labels, scores) in cases()) {
        let p = set(&labels, &scores);
        let r = evaluate(&p).unwrap();
        let b = oracle::brute_force(&p.labels, &p.predicted);
        prop_assert!((r.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((r.macro_f1 - b.macro_f1).abs() < 1e-12);
        for k in 0..2 {
            prop_assert!((r.f1_per_class[k] - b.f1[k]).abs() < 1e-12);
            prop_assert_eq!(r.counts[k].tp, b.counts[k][0]);
        }
        if both_classes(&labels) {
            let a = r.auc.unwrap();
            prop_assert!((a - oracle::pair_auc(&p.labels, &p.scores).unwrap()).abs() < 1e-12);
            prop_assert!((a - auc_trapezoid(&p.labels, &p.scores).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps((labels, scores) in cases()) {
        prop_assume!(both_classes(&labels));
        let l: Vec<ClassLabel> = labels.iter().map(|&b| label(b)).collect();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() / 100.0).collect();
        prop_assert!((auc(&l, &scores).unwrap() - auc(&l, &warped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_flips_when_labels_and_scores_mirror((labels, scores) in cases()) {
        prop_assume!(both_classes(&labels));
        let l: Vec<ClassLabel> = labels.iter().map(|&b| label(b)).collect();
        let swapped: Vec<ClassLabel> = labels.iter().map(|&b| label(!b)).collect();
        let a = auc(&l, &scores).unwrap();
        prop_assert!((auc(&swapped, &scores).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn order_does_not_matter((labels, scores) in cases(), rot in 0usize..80) {
        let n = labels.len();
        let r = rot % n;
        let mut l2 = labels.clone();
        let mut s2 = scores.clone();
        l2.rotate_left(r);
        s2.rotate_left(r);
        l2.reverse();
        s2.reverse();
        let a = evaluate(&set(&labels, &scores)).unwrap();
        let b = evaluate(&set(&l2, &s2)).unwrap();
        prop_assert_eq!(a.counts, b.counts);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert_eq!(a.auc.is_some(), b.auc.is_some());
        if let (Some(x), Some(y)) = (a.auc, b.auc) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_errors_give_macro_f1_equal_accuracy(n in 1usize..40, errs in 0usize..40) {
        // n per class, the same number of mistakes in each direction.
        let e = errs.min(n);
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for i in 0..n {
            labels.push(true);
            scores.push(if i < e { 0.1 } else { 0.9 });
            labels.push(false);
            scores.push(if i < e { 0.9 } else { 0.1 });
        }
        let r = evaluate(&set(&labels, &scores)).unwrap();
        prop_assert!((r.macro_f1 - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn values_are_bounded((labels, scores) in cases()) {
        let r = evaluate(&set(&labels, &scores)).unwrap();
        for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
