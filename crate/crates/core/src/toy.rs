//! Synthetic two-class image set for smoke tests: a noisy background with
//! one colored blob whose hue depends on the class.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dataset::ClassLabel;
use crate::preprocess::Tensor3;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            per_class: 200,
            side: 64,
            seed: 0,
        }
    }
}

fn blob_color(label: ClassLabel) -> [f32; 3] {
    match label {
        ClassLabel::Hem => [0.30, 0.35, 0.85],
        ClassLabel::All => [0.85, 0.30, 0.40],
    }
}

/// Image `index` of class `label`.
pub fn toy_image(label: ClassLabel, index: usize, side: usize, seed: u64) -> Tensor3 {
    let mut rng = rng_for(seed, &format!("toy/{}", label.name()), index as u64);
    let s = side as f32;
    let radius = s * rng.random_range(0.15..0.30);
    let cy = s * rng.random_range(0.3..0.7);
    let cx = s * rng.random_range(0.3..0.7);
    let base = blob_color(label);
    let tint: f32 = rng.random_range(-0.08..0.08);
    let mut img = Tensor3::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            let inside = dy * dy + dx * dx <= radius * radius;
            let mut px = [0.0f32; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let noise: f32 = rng.random_range(-0.05..0.05);
                let value = if inside { base[c] + tint } else { 0.80 };
                *v = (value + noise).clamp(0.0, 1.0);
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}

/// Write `root/hem/*.png` and `root/all/*.png`; returns the written paths.
pub fn write_toy_dataset(root: &Path, spec: ToySpec) -> std::io::Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(2 * spec.per_class);
    for label in ClassLabel::BOTH {
        let dir = root.join(label.name().to_lowercase());
        fs::create_dir_all(&dir)?;
        for i in 0..spec.per_class {
            let png = toy_image(label, i, spec.side, spec.seed)
                .to_png_bytes()
                .map_err(std::io::Error::other)?;
            let path = dir.join(format!("{}_{i:04}.png", label.name().to_lowercase()));
            fs::write(&path, png)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = toy_image(ClassLabel::All, 3, 32, 1);
        assert_eq!(a, toy_image(ClassLabel::All, 3, 32, 1));
        assert_ne!(a, toy_image(ClassLabel::All, 4, 32, 1));
        let (lo, hi) = a.value_range();
        assert!(lo >= 0.0 && hi <= 1.0);
    }
}
