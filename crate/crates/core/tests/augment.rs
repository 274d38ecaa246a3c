mod common;

use std::collections::HashMap;

use leukopipe::augment::ops::{gaussian_kernel, hflip, rotate, Interp};
use leukopipe::augment::{apply_t, execute_balance, plan_balance, AugmentError, AugmentationConfig, Sampling};
use leukopipe::dataset::{stratified_split, ClassLabel, Origin, Split};
use leukopipe::par::Parallelism;
use leukopipe::preprocess::load_image;
use proptest::prelude::*;

use common::{synthetic_manifest, textured_image, write_images};

const SIDE: usize = 32;

fn small(cfg: AugmentationConfig) -> AugmentationConfig {
    AugmentationConfig { crop_size: SIDE, ..cfg }
}

#[test]
fn gaussian_kernel_matches_closed_form() {
    let k = gaussian_kernel(5, 1.3);
    let raw: Vec<f64> = (-2..=2).map(|i: i32| (-(i * i) as f64 / (2.0 * 1.3 * 1.3)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    for (a, b) in k.iter().zip(&raw) {
        assert!((*a as f64 - b / sum).abs() < 1e-6);
    }
}

#[test]
fn quarter_turn_permutes_pixels() {
    let img = textured_image(SIDE, 1);
    let out = rotate(&img, 90.0, Interp::Nearest);
    // counter-clockwise: output (y, x) reads input (x, side-1-y)
    for y in 0..SIDE {
        for x in 0..SIDE {
            let want = img.pixel(x, SIDE - 1 - y);
            let got = out.pixel(y, x);
            for c in 0..3 {
                assert!((want[c] - got[c]).abs() < 1e-5, "({y},{x})");
            }
        }
    }
}

#[test]
fn hflip_twice_is_identity() {
    let img = textured_image(SIDE, 2);
    assert_eq!(hflip(&hflip(&img)), img);
}

#[test]
fn wrong_shape_rejected() {
    let img = textured_image(SIDE + 1, 0);
    assert!(matches!(
        apply_t(&img, 0, &small(AugmentationConfig::default())),
        Err(AugmentError::ShapeMismatch { .. })
    ));
}

#[test]
fn plan_needs_split_and_counts_originals() {
    let m = synthetic_manifest(3, 8, None);
    assert!(matches!(plan_balance(&m, 10, Sampling::RoundRobin), Err(AugmentError::NoSplit)));
    let m = synthetic_manifest(3, 12, Some(Split::Train));
    let plan = plan_balance(&m, 10, Sampling::RoundRobin).unwrap();
    assert_eq!(plan.deficits, [7, 0]);
    assert_eq!(plan.total(), 7);
}

#[test]
fn balance_writes_children_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_images(&tmp.path().join("src"), 3, 5, SIDE);
    let cfg = small(AugmentationConfig::default());
    let plan = plan_balance(&base, 8, Sampling::RoundRobin).unwrap();
    let a = execute_balance(&base, &plan, &cfg, 11, &tmp.path().join("a"), Parallelism::Sequential).unwrap();
    let b = execute_balance(&base, &plan, &cfg, 11, &tmp.path().join("b"), Parallelism::from_workers(4)).unwrap();

    assert_eq!(a.class_counts(Some(Split::Train), None), [8, 8]);
    assert_eq!(a.class_counts(None, Some(Origin::Augmented)), [5, 3]);
    a.check_invariants().unwrap();

    // round robin over 3 parents for 5 children: two parents get 2, one gets 1
    let mut per_parent: HashMap<&str, usize> = HashMap::new();
    for r in a.records.iter().filter(|r| r.origin == Origin::Augmented && r.label == ClassLabel::Hem) {
        *per_parent.entry(r.parent_id.as_deref().unwrap()).or_default() += 1;
    }
    let mut spread: Vec<usize> = per_parent.into_values().collect();
    spread.sort();
    assert_eq!(spread, vec![1, 2, 2]);

    let aug = |m: &leukopipe::dataset::DatasetManifest| -> Vec<_> {
        m.records
            .iter()
            .filter(|r| r.origin == Origin::Augmented)
            .map(|r| (r.id.clone(), r.aug_seed, load_image(&r.path, SIDE).unwrap()))
            .collect()
    };
    assert_eq!(aug(&a), aug(&b));
}

#[test]
fn balance_rejects_second_pass_and_missing_parents() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_images(&tmp.path().join("src"), 2, 4, SIDE);
    let cfg = small(AugmentationConfig::default());
    let plan = plan_balance(&base, 4, Sampling::UniformWithReplacement).unwrap();
    let done = execute_balance(&base, &plan, &cfg, 1, &tmp.path().join("o"), Parallelism::Sequential).unwrap();
    let again = plan_balance(&done, 6, Sampling::RoundRobin).unwrap();
    assert!(matches!(
        execute_balance(&done, &again, &cfg, 1, &tmp.path().join("p"), Parallelism::Sequential),
        Err(AugmentError::AlreadyAugmented)
    ));

    let mut gone = base.clone();
    std::fs::remove_file(&gone.records[0].path).unwrap();
    gone.records[0].path.set_extension("missing");
    let plan = plan_balance(&gone, 6, Sampling::RoundRobin).unwrap();
    assert!(matches!(
        execute_balance(&gone, &plan, &cfg, 1, &tmp.path().join("q"), Parallelism::Sequential),
        Err(AugmentError::ParentMissing { .. })
    ));
}

#[test]
fn balance_only_uses_train_parents() {
    let m = stratified_split(&synthetic_manifest(20, 40, None), 0.25, 3).unwrap();
    let plan = plan_balance(&m, 40, Sampling::RoundRobin).unwrap();
    assert_eq!(plan.original_counts, [15, 30]);
    assert_eq!(plan.deficits, [25, 10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn output_is_closed_and_seeded(seed: u64, k in 0u64..50) {
        let cfg = small(AugmentationConfig::default());
        let img = textured_image(SIDE, k);
        let a = apply_t(&img, seed, &cfg).unwrap();
        prop_assert!(a.is_shape(SIDE, SIDE));
        let (lo, hi) = a.value_range();
        prop_assert!(lo >= 0.0 && hi <= 1.0);
        prop_assert_eq!(&a, &apply_t(&img, seed, &cfg).unwrap());
    }

    #[test]
    fn identity_config_is_identity(seed: u64, k in 0u64..50) {
        let img = textured_image(SIDE, k);
        let out = apply_t(&img, seed, &small(AugmentationConfig::identity())).unwrap();
        prop_assert!(out.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn plan_deficits_fill_to_target(hem in 0usize..500, all in 0usize..500, m in 0usize..600) {
        let plan = plan_balance(&synthetic_manifest(hem, all, Some(Split::Train)), m, Sampling::RoundRobin).unwrap();
        prop_assert_eq!(plan.deficits, [m.saturating_sub(hem), m.saturating_sub(all)]);
        prop_assert_eq!(hem + plan.deficits[0], hem.max(m));
        prop_assert_eq!(all + plan.deficits[1], all.max(m));
    }
}
