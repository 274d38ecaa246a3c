//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use std::path::Path;

use leukopipe::dataset::{ClassLabel, DatasetManifest, ImageRecord, Split};
use leukopipe::preprocess::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Learning rate for toy-scale tiny_cnn runs.
pub const TOY_LEARNING_RATE: f64 = 1e-3;

/// Manifest of `hem + all` originals with placeholder paths.
pub fn synthetic_manifest(hem: usize, all: usize, split: Option<Split>) -> DatasetManifest {
    let mut records = Vec::with_capacity(hem + all);
    for (label, n) in [(ClassLabel::Hem, hem), (ClassLabel::All, all)] {
        for i in 0..n {
            let id = format!("{}_{i:05}", label.name().to_lowercase());
            let mut r = ImageRecord::original(id.clone(), format!("/nonexistent/{id}.png"), label);
            r.split = split;
            records.push(r);
        }
    }
    DatasetManifest::new(records, Vec::new())
}

/// Smooth, non-symmetric test pattern in [0, 1].
pub fn textured_image(side: usize, k: u64) -> Tensor3 {
    let mut img = Tensor3::zeros(side, side);
    let phase = k as f32 * 0.7;
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f32 / side as f32, x as f32 / side as f32);
            img.set_pixel(
                y,
                x,
                [
                    0.5 + 0.5 * (6.0 * fx + phase).sin() * fy,
                    fx * fx,
                    0.5 + 0.4 * (9.0 * fy * fx + phase).cos(),
                ],
            );
        }
    }
    img
}

/// Write random PNGs and return a TRAIN-split manifest over them.
pub fn write_images(dir: &Path, hem: usize, all: usize, side: usize) -> DatasetManifest {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64((hem * 1000 + all) as u64);
    let mut m = synthetic_manifest(hem, all, Some(Split::Train));
    for r in &mut m.records {
        let data = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
        let path = dir.join(format!("{}.png", r.id));
        std::fs::write(&path, Tensor3::new(side, side, data).to_png_bytes().unwrap()).unwrap();
        r.path = path;
    }
    m.split_seed = Some(0);
    m
}

pub mod oracle {
    use super::*;
    use leukopipe::preprocess::load_image;

    pub struct Brute {
        /// `[tp, fp, fn, tn]` by class code.
        pub counts: [[usize; 4]; 2],
        pub accuracy: f64,
        pub precision: [f64; 2],
        pub recall: [f64; 2],
        pub f1: [f64; 2],
        pub macro_p: f64,
        pub macro_r: f64,
        pub macro_f1: f64,
    }

    /// Metrics by enumerating every item against every class.
    pub fn brute_force(labels: &[ClassLabel], predicted: &[ClassLabel]) -> Brute {
        let mut counts = [[0usize; 4]; 2];
        let mut correct = 0;
        for (&y, &p) in labels.iter().zip(predicted) {
            if y == p {
                correct += 1;
            }
            for class in [ClassLabel::Hem, ClassLabel::All] {
                let slot = match (y == class, p == class) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (true, false) => 2,
                    (false, false) => 3,
                };
                counts[class.code() as usize][slot] += 1;
            }
        }
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = counts.map(|c| div(c[0], c[0] + c[1]));
        let recall = counts.map(|c| div(c[0], c[0] + c[2]));
        let f1 = [0, 1].map(|k| {
            let (p, r) = (precision[k], recall[k]);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        });
        Brute {
            counts,
            accuracy: correct as f64 / labels.len() as f64,
            macro_p: (precision[0] + precision[1]) / 2.0,
            macro_r: (recall[0] + recall[1]) / 2.0,
            macro_f1: (f1[0] + f1[1]) / 2.0,
            precision,
            recall,
            f1,
        }
    }

    /// AUC by counting every (positive, negative) pair.
    pub fn pair_auc(labels: &[ClassLabel], scores: &[f64]) -> Option<f64> {
        let pos: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l == ClassLabel::All).map(|(_, &s)| s).collect();
        let neg: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l == ClassLabel::Hem).map(|(_, &s)| s).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut credit = 0.0;
        for &p in &pos {
            for &n in &neg {
                credit += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(credit / (pos.len() * neg.len()) as f64)
    }

    fn pixel_features(path: &Path) -> Vec<f64> {
        // 16x16 thumbnails keep the oracle fast; every pixel is a feature.
        load_image(path, 16).unwrap().data().iter().map(|&v| v as f64).collect()
    }

    /// Fit logistic regression on raw pixels of TRAIN + INTERNAL_VAL
    /// originals by full-batch gradient descent; return TEST macro F1.
    pub fn logistic_regression_f1(m: &DatasetManifest) -> f64 {
        let fit: Vec<(Vec<f64>, f64)> = m
            .records
            .iter()
            .filter(|r| r.is_original() && r.split != Some(Split::Test))
            .map(|r| (pixel_features(&r.path), r.label.code() as f64))
            .collect();
        let dim = fit[0].0.len();
        let mean: Vec<f64> = (0..dim).map(|j| fit.iter().map(|(x, _)| x[j]).sum::<f64>() / fit.len() as f64).collect();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let lr = 0.5;
        for _ in 0..300 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in &fit {
                let z: f64 = b + x.iter().zip(&mean).zip(&w).map(|((xi, mi), wi)| (xi - mi) * wi).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y;
                for j in 0..dim {
                    gw[j] += err * (x[j] - mean[j]);
                }
                gb += err;
            }
            let n = fit.len() as f64;
            for j in 0..dim {
                w[j] -= lr * gw[j] / n;
            }
            b -= lr * gb / n;
        }
        let test: Vec<_> = m.records_in(Split::Test).collect();
        let labels: Vec<ClassLabel> = test.iter().map(|r| r.label).collect();
        let predicted: Vec<ClassLabel> = test
            .iter()
            .map(|r| {
                let x = pixel_features(&r.path);
                let z: f64 = b + x.iter().zip(&mean).zip(&w).map(|((xi, mi), wi)| (xi - mi) * wi).sum::<f64>();
                if z >= 0.0 {
                    ClassLabel::All
                } else {
                    ClassLabel::Hem
                }
            })
            .collect();
        brute_force(&labels, &predicted).macro_f1
    }
}
