//! Stochastic augmentation and class balancing of the training split.
//!
//! [`apply_t`] composes, in order: horizontal flip, vertical flip, rotation,
//! color jitter, random resized crop, random affine, Gaussian blur,
//! sharpness adjustment and random perspective. Every random draw comes from
//! a single stream seeded by the caller, so a (image, seed, config) triple
//! always yields the same pixels.

pub mod ops;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    BalanceSummary, ClassLabel, DatasetManifest, ImageRecord, Origin, Split,
};
use crate::par::Parallelism;
use crate::preprocess::{load_image, PreprocessError, Tensor3, INPUT_SIDE};
use crate::seed::{derive_seed, rng_for, sha256_hex};
use ops::Interp;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("expected a {expected}x{expected} image, got {height}x{width}")]
    ShapeMismatch {
        height: usize,
        width: usize,
        expected: usize,
    },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("manifest has no train/test split")]
    NoSplit,
    #[error("manifest already contains augmented records")]
    AlreadyAugmented,
    #[error("balance plan does not match manifest: {0}")]
    PlanMismatch(String),
    #[error("parent image missing for {id}: {path}")]
    ParentMissing { id: String, path: PathBuf },
    #[error("no space left writing {0}")]
    DiskFull(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Parameters of the stochastic transform composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Rotation angle drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub crop_size: usize,
    /// Maximum translation as a fraction of width/height.
    pub affine_translate: f64,
    pub affine_scale: [f64; 2],
    pub affine_shear_deg: f64,
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
    pub sharp_factor: f64,
    pub sharp_p: f64,
    pub persp_distortion: f64,
    pub persp_p: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotation_deg: 25.0,
            jitter_brightness: 0.3,
            jitter_contrast: 0.3,
            jitter_saturation: 0.3,
            jitter_hue: 0.05,
            crop_scale: [0.7, 1.0],
            crop_ratio: [0.75, 1.33],
            crop_size: INPUT_SIDE,
            affine_translate: 0.05,
            affine_scale: [0.95, 1.05],
            affine_shear_deg: 10.0,
            blur_kernel: 3,
            blur_sigma: [0.1, 2.0],
            sharp_factor: 2.0,
            sharp_p: 0.3,
            persp_distortion: 0.2,
            persp_p: 0.3,
        }
    }
}

impl AugmentationConfig {
    /// Every transform reduced to a no-op.
    pub fn identity() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotation_deg: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            jitter_saturation: 0.0,
            jitter_hue: 0.0,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            crop_size: INPUT_SIDE,
            affine_translate: 0.0,
            affine_scale: [1.0, 1.0],
            affine_shear_deg: 0.0,
            blur_kernel: 1,
            blur_sigma: [0.1, 0.1],
            sharp_factor: 1.0,
            sharp_p: 0.0,
            persp_distortion: 0.0,
            persp_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidConfig(msg));
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("sharp_p", self.sharp_p),
            ("persp_p", self.persp_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} is not a probability"));
            }
        }
        for (name, [lo, hi]) in [
            ("crop_scale", self.crop_scale),
            ("crop_ratio", self.crop_ratio),
            ("affine_scale", self.affine_scale),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo <= hi) {
                return bad(format!("{name} interval [{lo}, {hi}] is empty"));
            }
            if lo <= 0.0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.crop_scale[1] > 1.0 {
            return bad("crop_scale upper bound exceeds 1".into());
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("affine_translate", self.affine_translate),
            ("affine_shear_deg", self.affine_shear_deg),
            ("sharp_factor", self.sharp_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name}={v} must be finite and non-negative"));
            }
        }
        if !(0.0..=0.5).contains(&self.jitter_hue) {
            return bad(format!("jitter_hue={} outside [0, 0.5]", self.jitter_hue));
        }
        if !(0.0..=1.0).contains(&self.affine_translate) {
            return bad("affine_translate outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.persp_distortion) {
            return bad("persp_distortion outside [0, 1]".into());
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return bad(format!("blur_kernel={} must be odd and >= 1", self.blur_kernel));
        }
        if self.crop_size == 0 {
            return bad("crop_size must be positive".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn gate(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Integer in `[lo, hi)`.
fn randint(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    rng.random_range(lo..hi)
}

/// Crop box `(top, left, height, width)` for the random resized crop.
/// Falls back to a ratio-clamped center crop after 10 misses.
pub fn crop_box(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    scale: [f64; 2],
    ratio: [f64; 2],
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let log_ratio = [ratio[0].ln(), ratio[1].ln()];
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = uniform(rng, log_ratio[0], log_ratio[1]).exp();
        let w = (target * aspect).sqrt().round_ties_even() as i64;
        let h = (target / aspect).sqrt().round_ties_even() as i64;
        if 0 < w && w <= width as i64 && 0 < h && h <= height as i64 {
            let top = randint(rng, 0, height as i64 - h + 1);
            let left = randint(rng, 0, width as i64 - w + 1);
            return (top as usize, left as usize, h as usize, w as usize);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio[0] {
        (width, (width as f64 / ratio[0]).round_ties_even() as usize)
    } else if in_ratio > ratio[1] {
        ((height as f64 * ratio[1]).round_ties_even() as usize, height)
    } else {
        (width, height)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// Start and end corners for the random perspective.
pub fn perspective_corners(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    distortion: f64,
) -> ([[f64; 2]; 4], [[f64; 2]; 4]) {
    let (h, w) = (height as i64, width as i64);
    let bound_h = (distortion * (h / 2) as f64) as i64 + 1;
    let bound_w = (distortion * (w / 2) as f64) as i64 + 1;
    let mut pt = |x: (i64, i64), y: (i64, i64)| {
        let px = randint(rng, x.0, x.1) as f64;
        let py = randint(rng, y.0, y.1) as f64;
        [px, py]
    };
    let top_left = pt((0, bound_w), (0, bound_h));
    let top_right = pt((w - bound_w, w), (0, bound_h));
    let bottom_right = pt((w - bound_w, w), (h - bound_h, h));
    let bottom_left = pt((0, bound_w), (h - bound_h, h));
    let start = [
        [0.0, 0.0],
        [(w - 1) as f64, 0.0],
        [(w - 1) as f64, (h - 1) as f64],
        [0.0, (h - 1) as f64],
    ];
    (start, [top_left, top_right, bottom_right, bottom_left])
}

/// Apply the full augmentation composition to a `crop_size` square image
/// with values in [0,1]. Output has the same shape, values clamped to [0,1].
pub fn apply_t(img: &Tensor3, rng_seed: u64, cfg: &AugmentationConfig) -> Result<Tensor3, AugmentError> {
    cfg.validate()?;
    let side = cfg.crop_size;
    if !img.is_shape(side, side) {
        return Err(AugmentError::ShapeMismatch {
            height: img.height(),
            width: img.width(),
            expected: side,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x = img.clone();

    if gate(&mut rng, cfg.hflip_p) {
        x = ops::hflip(&x);
    }
    if gate(&mut rng, cfg.vflip_p) {
        x = ops::vflip(&x);
    }

    let angle = uniform(&mut rng, -cfg.rotation_deg, cfg.rotation_deg);
    x = ops::rotate(&x, angle, Interp::Nearest);

    if cfg.jitter_brightness > 0.0 {
        let d = cfg.jitter_brightness;
        let f = uniform(&mut rng, (1.0 - d).max(0.0), 1.0 + d);
        x = ops::adjust_brightness(&x, f as f32);
    }
    if cfg.jitter_contrast > 0.0 {
        let d = cfg.jitter_contrast;
        let f = uniform(&mut rng, (1.0 - d).max(0.0), 1.0 + d);
        x = ops::adjust_contrast(&x, f as f32);
    }
    if cfg.jitter_saturation > 0.0 {
        let d = cfg.jitter_saturation;
        let f = uniform(&mut rng, (1.0 - d).max(0.0), 1.0 + d);
        x = ops::adjust_saturation(&x, f as f32);
    }
    if cfg.jitter_hue > 0.0 {
        let shift = uniform(&mut rng, -cfg.jitter_hue, cfg.jitter_hue);
        x = ops::adjust_hue(&x, shift as f32);
    }

    let (top, left, h, w) = crop_box(&mut rng, x.height(), x.width(), cfg.crop_scale, cfg.crop_ratio);
    x = ops::resized_crop(&x, top, left, h, w, side)?;

    let max_dx = cfg.affine_translate * side as f64;
    let max_dy = cfg.affine_translate * side as f64;
    let tx = uniform(&mut rng, -max_dx, max_dx).round_ties_even();
    let ty = uniform(&mut rng, -max_dy, max_dy).round_ties_even();
    let scale = uniform(&mut rng, cfg.affine_scale[0], cfg.affine_scale[1]);
    let shear_x = uniform(&mut rng, -cfg.affine_shear_deg, cfg.affine_shear_deg);
    if tx != 0.0 || ty != 0.0 || scale != 1.0 || shear_x != 0.0 {
        x = ops::affine(&x, 0.0, [tx, ty], scale, [shear_x, 0.0], Interp::Nearest);
    }

    let sigma = uniform(&mut rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
    x = ops::gaussian_blur(&x, cfg.blur_kernel, sigma);

    if gate(&mut rng, cfg.sharp_p) {
        x = ops::adjust_sharpness(&x, cfg.sharp_factor as f32);
    }

    if gate(&mut rng, cfg.persp_p) {
        let (start, end) = perspective_corners(&mut rng, side, side, cfg.persp_distortion);
        if let Some(coeffs) = ops::perspective_coeffs(start, end) {
            x = ops::warp_perspective(&x, coeffs, Interp::Bilinear);
        }
    }

    for v in x.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Sampling {
    /// Cycle through a seed-shuffled parent list.
    #[default]
    RoundRobin,
    UniformWithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub target_m: usize,
    /// Original TRAIN counts the plan was computed from, by class code.
    pub original_counts: [usize; 2],
    /// Samples to generate, by class code.
    pub deficits: [usize; 2],
    pub sampling: Sampling,
}

impl BalancePlan {
    pub fn deficit(&self, class: ClassLabel) -> usize {
        self.deficits[class.index()]
    }

    pub fn total(&self) -> usize {
        self.deficits.iter().sum()
    }
}

/// Deficits `max(0, M - n_c)` over ORIGINAL TRAIN records.
pub fn plan_balance(
    manifest: &DatasetManifest,
    target_m: usize,
    sampling: Sampling,
) -> Result<BalancePlan, AugmentError> {
    if !manifest.is_split() {
        return Err(AugmentError::NoSplit);
    }
    let counts = manifest.class_counts(Some(Split::Train), Some(Origin::Original));
    Ok(BalancePlan {
        target_m,
        original_counts: counts,
        deficits: counts.map(|n| target_m.saturating_sub(n)),
        sampling,
    })
}

struct Job {
    parent_id: String,
    parent_path: PathBuf,
    label: ClassLabel,
    child_index: usize,
    seed: u64,
}

impl Job {
    fn record_id(&self) -> String {
        format!("{}_aug{}", self.parent_id, self.child_index)
    }
}

fn plan_jobs(
    manifest: &DatasetManifest,
    plan: &BalancePlan,
    global_seed: u64,
) -> Result<Vec<Job>, AugmentError> {
    let mut jobs = Vec::with_capacity(plan.total());
    for class in ClassLabel::BOTH {
        let deficit = plan.deficit(class);
        if deficit == 0 {
            continue;
        }
        let mut parents: Vec<&ImageRecord> = manifest
            .records_in(Split::Train)
            .filter(|r| r.label == class && r.is_original())
            .collect();
        parents.sort_by(|a, b| a.id.cmp(&b.id));
        if parents.is_empty() {
            return Err(AugmentError::PlanMismatch(format!("no {class} parents to augment")));
        }
        let mut children = vec![0usize; parents.len()];
        let order: Vec<usize> = match plan.sampling {
            Sampling::RoundRobin => {
                let mut idx: Vec<usize> = (0..parents.len()).collect();
                rand::seq::SliceRandom::shuffle(
                    idx.as_mut_slice(),
                    &mut rng_for(global_seed, "balance/parents", class.code() as u64),
                );
                (0..deficit).map(|j| idx[j % idx.len()]).collect()
            }
            Sampling::UniformWithReplacement => (0..deficit)
                .map(|j| {
                    let label = format!("balance/pick/{}", class.name());
                    rng_for(global_seed, &label, j as u64).random_range(0..parents.len())
                })
                .collect(),
        };
        let seed_label = format!("augment/{}", class.name());
        for (j, p) in order.into_iter().enumerate() {
            let parent = parents[p];
            jobs.push(Job {
                parent_id: parent.id.clone(),
                parent_path: parent.path.clone(),
                label: class,
                child_index: children[p],
                seed: derive_seed(global_seed, &seed_label, j as u64),
            });
            children[p] += 1;
        }
    }
    Ok(jobs)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AugmentError> {
    fs::write(path, bytes).map_err(|source| {
        if source.kind() == std::io::ErrorKind::StorageFull {
            AugmentError::DiskFull(path.to_path_buf())
        } else {
            AugmentError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Generate the planned augmented samples, write them as PNG under
/// `out_dir` and return the manifest extended with their records.
pub fn execute_balance(
    manifest: &DatasetManifest,
    plan: &BalancePlan,
    cfg: &AugmentationConfig,
    global_seed: u64,
    out_dir: &Path,
    par: Parallelism,
) -> Result<DatasetManifest, AugmentError> {
    cfg.validate()?;
    let fresh = plan_balance(manifest, plan.target_m, plan.sampling)?;
    if fresh.deficits != plan.deficits {
        return Err(AugmentError::PlanMismatch(format!(
            "plan deficits {:?}, manifest implies {:?}",
            plan.deficits, fresh.deficits
        )));
    }
    let summary = BalanceSummary {
        target_m: plan.target_m,
        global_seed,
        sampling: plan.sampling,
    };
    if plan.total() == 0 {
        let mut out = manifest.clone();
        out.balance = Some(summary);
        return Ok(out);
    }
    if manifest.has_augmented() {
        return Err(AugmentError::AlreadyAugmented);
    }
    fs::create_dir_all(out_dir).map_err(|source| AugmentError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let out_dir = out_dir.canonicalize().map_err(|source| AugmentError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let jobs = plan_jobs(manifest, plan, global_seed)?;
    let side = cfg.crop_size;
    let records = par.try_map(&jobs, |job| -> Result<ImageRecord, AugmentError> {
        if !job.parent_path.exists() {
            return Err(AugmentError::ParentMissing {
                id: job.parent_id.clone(),
                path: job.parent_path.clone(),
            });
        }
        let parent = load_image(&job.parent_path, side)?;
        let child = apply_t(&parent, job.seed, cfg)?;
        let id = job.record_id();
        let path = out_dir.join(format!("{id}.png"));
        write_file(&path, &child.to_png_bytes()?)?;
        Ok(ImageRecord {
            id,
            path,
            label: job.label,
            split: Some(Split::Train),
            origin: Origin::Augmented,
            parent_id: Some(job.parent_id.clone()),
            aug_seed: Some(job.seed),
        })
    })?;

    let mut out = manifest.clone();
    out.records.extend(records);
    out.balance = Some(summary);
    Ok(out)
}
