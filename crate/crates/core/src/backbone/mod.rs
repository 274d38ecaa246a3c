//! Backbone registry and the two-logit classification head.
//!
//! Every backbone maps `[N, 3, 224, 224]` to a feature vector `h`; the model
//! adds a freshly initialized linear head producing two logits (HEM, ALL).
//! Backbone parameter names follow torchvision's state-dict layout, so
//! converted ImageNet weights load by name. The original classifier in a
//! weights file is ignored.

pub mod efficientnet;
mod layers;
pub mod resnet;
pub mod store;
pub mod tiny;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Init, Linear, Module};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{normalize, Normalization, PreprocessError, Tensor3, INPUT_SIDE};
use crate::seed::sha256_hex;
use store::SeededStore;

pub const NUM_CLASSES: usize = 2;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("unknown architecture {0:?}")]
    UnknownArch(String),
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("expected {expected}x{expected}x3 input, got {height}x{width}")]
    ShapeMismatch {
        height: usize,
        width: usize,
        expected: usize,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint digest mismatch for {field}: sidecar {expected}, found {found}")]
    DigestMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("checkpoint sidecar: {0}")]
    Sidecar(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resnet50,
    Resnet101,
    EffnetB0,
    EffnetB1,
    EffnetB3,
    /// Three-stage CNN for CPU-scale runs; has no published weights.
    TinyCnn,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Resnet50,
        Arch::Resnet101,
        Arch::EffnetB0,
        Arch::EffnetB1,
        Arch::EffnetB3,
        Arch::TinyCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Resnet50 => "resnet50",
            Arch::Resnet101 => "resnet101",
            Arch::EffnetB0 => "effnet_b0",
            Arch::EffnetB1 => "effnet_b1",
            Arch::EffnetB3 => "effnet_b3",
            Arch::TinyCnn => "tiny_cnn",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Arch::Resnet50 => "ResNet50",
            Arch::Resnet101 => "ResNet101",
            Arch::EffnetB0 => "EfficientNet-B0",
            Arch::EffnetB1 => "EfficientNet-B1",
            Arch::EffnetB3 => "EfficientNet-B3",
            Arch::TinyCnn => "TinyCNN",
        }
    }

    /// Width of the penultimate feature vector.
    pub fn feature_dim(self) -> usize {
        match self {
            Arch::Resnet50 | Arch::Resnet101 => 2048,
            Arch::EffnetB0 | Arch::EffnetB1 => 1280,
            Arch::EffnetB3 => 1536,
            Arch::TinyCnn => tiny::TINY_FEATURES,
        }
    }
}

impl FromStr for Arch {
    type Err = BackboneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| BackboneError::UnknownArch(s.to_string()))
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Local pretrained weight file (safetensors) with an optional content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsSource {
    pub path: PathBuf,
    #[serde(default)]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub pretrained: bool,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub head_init_seed: u64,
    #[serde(default)]
    pub freeze_backbone: bool,
    #[serde(default)]
    pub weights: Option<WeightsSource>,
}

impl ModelSpec {
    pub fn new(arch: Arch, pretrained: bool, head_init_seed: u64) -> Self {
        Self {
            arch,
            pretrained,
            feature_dim: arch.feature_dim(),
            num_classes: NUM_CLASSES,
            head_init_seed,
            freeze_backbone: false,
            weights: None,
        }
    }

    pub fn with_weights(mut self, path: impl Into<PathBuf>, sha256: Option<String>) -> Self {
        self.weights = Some(WeightsSource {
            path: path.into(),
            sha256,
        });
        self
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.feature_dim != self.arch.feature_dim() {
            return Err(BackboneError::InvalidSpec(format!(
                "{} has feature_dim {}, spec says {}",
                self.arch,
                self.arch.feature_dim(),
                self.feature_dim
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(BackboneError::InvalidSpec(format!(
                "num_classes must be {NUM_CLASSES}"
            )));
        }
        Ok(())
    }
}

/// A convolutional trunk ending in global pooling.
pub trait FeatureExtractor: Send + Sync {
    /// `[N, 3, H, W] -> [N, feature_dim]`.
    fn features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor>;
    fn feature_dim(&self) -> usize;
}

pub struct Model {
    spec: ModelSpec,
    store: SeededStore,
    backbone: Box<dyn FeatureExtractor>,
    head: Linear,
    device: Device,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("spec", &self.spec).finish_non_exhaustive()
    }
}

fn build_backbone(arch: Arch, vb: candle_nn::VarBuilder) -> candle_core::Result<Box<dyn FeatureExtractor>> {
    use efficientnet::{EfficientNet, Scaling};
    Ok(match arch {
        Arch::Resnet50 => Box::new(resnet::ResNet::resnet50(vb)?),
        Arch::Resnet101 => Box::new(resnet::ResNet::resnet101(vb)?),
        Arch::EffnetB0 => Box::new(EfficientNet::new(Scaling::B0, vb)?),
        Arch::EffnetB1 => Box::new(EfficientNet::new(Scaling::B1, vb)?),
        Arch::EffnetB3 => Box::new(EfficientNet::new(Scaling::B3, vb)?),
        Arch::TinyCnn => Box::new(tiny::TinyCnn::new(vb)?),
    })
}

fn file_sha256(path: &Path) -> Result<String, BackboneError> {
    let bytes = fs::read(path).map_err(|source| BackboneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Construct the model: backbone from pretrained weights (or seeded random
/// init when `pretrained` is false) plus a head initialized uniformly in
/// `±1/sqrt(feature_dim)` from `head_init_seed`.
pub fn build_model(spec: &ModelSpec) -> Result<Model, BackboneError> {
    spec.validate()?;
    let device = Device::Cpu;
    let store = SeededStore::new(spec.head_init_seed);
    let vb = store.var_builder(&device);
    let backbone = build_backbone(spec.arch, vb.clone())?;
    let bound = 1.0 / (spec.feature_dim as f64).sqrt();
    let init = Init::Uniform {
        lo: -bound,
        up: bound,
    };
    let head_vb = vb.pp("head");
    let w = head_vb.get_with_hints((NUM_CLASSES, spec.feature_dim), "weight", init)?;
    let b = head_vb.get_with_hints(NUM_CLASSES, "bias", init)?;
    let head = Linear::new(w, Some(b));
    let model = Model {
        spec: spec.clone(),
        store,
        backbone,
        head,
        device,
    };
    if spec.pretrained {
        model.load_pretrained()?;
    }
    Ok(model)
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn vars(&self) -> Vec<(String, Var)> {
        let data = self.store.varmap().data().lock().expect("varmap lock");
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    /// Parameters the optimizer updates. Batch-norm running statistics are
    /// buffers, not parameters.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
            .filter(|(name, _)| !self.spec.freeze_backbone || name.starts_with(HEAD_PREFIX))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn head_values(&self) -> Result<(Vec<Vec<f32>>, Vec<f32>), BackboneError> {
        let w = self.head.weight().to_vec2::<f32>()?;
        let b = self
            .head
            .bias()
            .expect("head has a bias")
            .to_vec1::<f32>()?;
        Ok((w, b))
    }

    fn load_pretrained(&self) -> Result<(), BackboneError> {
        let source = self.spec.weights.as_ref().ok_or_else(|| {
            BackboneError::WeightsUnavailable(format!("no weight file configured for {}", self.spec.arch))
        })?;
        if !source.path.is_file() {
            return Err(BackboneError::WeightsUnavailable(format!(
                "{} not found",
                source.path.display()
            )));
        }
        if let Some(expected) = &source.sha256 {
            let found = file_sha256(&source.path)?;
            if !found.eq_ignore_ascii_case(expected) {
                return Err(BackboneError::WeightsUnavailable(format!(
                    "{} has sha256 {found}, expected {expected}",
                    source.path.display()
                )));
            }
        }
        let tensors = candle_core::safetensors::load(&source.path, &self.device)?;
        self.assign(&tensors, false).map_err(|e| match e {
            BackboneError::Sidecar(msg) => BackboneError::WeightsUnavailable(msg),
            other => other,
        })
    }

    /// Copy tensors into the model by name. With `include_head` false the
    /// head is left untouched; extra tensors in `tensors` are ignored.
    fn assign(&self, tensors: &HashMap<String, Tensor>, include_head: bool) -> Result<(), BackboneError> {
        let mut missing = Vec::new();
        for (name, var) in self.vars() {
            if !include_head && name.starts_with(HEAD_PREFIX) {
                continue;
            }
            match tensors.get(&name) {
                Some(t) if t.shape() == var.shape() => var.set(&t.to_dtype(DType::F32)?)?,
                Some(t) => {
                    return Err(BackboneError::Sidecar(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        var.shape()
                    )))
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            let preview: Vec<_> = missing.iter().take(5).cloned().collect();
            return Err(BackboneError::Sidecar(format!(
                "{} tensors missing, e.g. {}",
                missing.len(),
                preview.join(", ")
            )));
        }
        Ok(())
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor, BackboneError> {
        Ok(self.backbone.features(x, train && !self.spec.freeze_backbone)?)
    }

    /// Logits `[N, 2]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor, BackboneError> {
        let h = self.features(x, train)?;
        Ok(self.head.forward(&h)?)
    }

    /// Stack normalized images into `[N, 3, H, W]`.
    pub fn batch_tensor(&self, images: &[Tensor3], norm: &Normalization) -> Result<Tensor, BackboneError> {
        images_to_tensor(images, norm, &self.device)
    }

    /// Write all parameters and buffers to a safetensors file.
    pub fn save_weights(&self, path: &Path) -> Result<(), BackboneError> {
        self.store.varmap().save(path)?;
        Ok(())
    }

    pub fn load_weights(&self, path: &Path) -> Result<(), BackboneError> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&tensors, true)
    }
}

pub fn images_to_tensor(images: &[Tensor3], norm: &Normalization, device: &Device) -> Result<Tensor, BackboneError> {
    let mut data = Vec::with_capacity(images.len() * INPUT_SIDE * INPUT_SIDE * 3);
    for img in images {
        if !img.is_shape(INPUT_SIDE, INPUT_SIDE) {
            return Err(BackboneError::ShapeMismatch {
                height: img.height(),
                width: img.width(),
                expected: INPUT_SIDE,
            });
        }
        data.extend(normalize(img, norm.mean, norm.std)?.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, INPUT_SIDE, INPUT_SIDE), device)?)
}

/// Numerically stable two-class softmax.
pub fn softmax_pair(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Class probabilities `[P(HEM), P(ALL)]` per image, inference mode.
pub fn predict_proba(model: &Model, batch: &[Tensor3], norm: &Normalization) -> Result<Vec<[f64; 2]>, BackboneError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let x = model.batch_tensor(batch, norm)?;
    let logits = model.forward_t(&x, false)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(logits.into_iter().map(|r| softmax_pair([r[0], r[1]])).collect())
}

/// Metadata written next to a weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub schema_version: u32,
    pub model_spec: ModelSpec,
    pub train_config_digest: String,
    pub augmentation_digest: String,
    pub epoch: usize,
    pub best_val_macro_f1: f64,
    pub global_seed: u64,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: PathBuf,
    pub sidecar: CheckpointSidecar,
}

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SIDECAR_FILE: &str = "model.json";

impl Checkpoint {
    /// Write the weight blob and sidecar into `dir`.
    #[allow(clippy::too_many_arguments)]
    pub fn save(
        model: &Model,
        dir: &Path,
        train_config_digest: &str,
        augmentation_digest: &str,
        epoch: usize,
        best_val_macro_f1: f64,
        global_seed: u64,
    ) -> Result<Self, BackboneError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| BackboneError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let weights = dir.join(WEIGHTS_FILE);
        model.save_weights(&weights)?;
        let sidecar = CheckpointSidecar {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model_spec: model.spec().clone(),
            train_config_digest: train_config_digest.to_string(),
            augmentation_digest: augmentation_digest.to_string(),
            epoch,
            best_val_macro_f1,
            global_seed,
            weights_sha256: file_sha256(&weights)?,
        };
        let side_path = dir.join(SIDECAR_FILE);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side_path, text).map_err(io(&side_path))?;
        Ok(Self { weights, sidecar })
    }

    /// Read a checkpoint directory and verify the blob's content hash.
    pub fn load(dir: &Path) -> Result<Self, BackboneError> {
        let side_path = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&side_path).map_err(|source| BackboneError::Io {
            path: side_path.clone(),
            source,
        })?;
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&text).map_err(|e| BackboneError::Sidecar(e.to_string()))?;
        if sidecar.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(BackboneError::Sidecar(format!(
                "schema version {}, expected {CHECKPOINT_SCHEMA_VERSION}",
                sidecar.schema_version
            )));
        }
        let weights = dir.join(WEIGHTS_FILE);
        let found = file_sha256(&weights)?;
        if found != sidecar.weights_sha256 {
            return Err(BackboneError::DigestMismatch {
                field: "weights_sha256",
                expected: sidecar.weights_sha256.clone(),
                found,
            });
        }
        Ok(Self { weights, sidecar })
    }

    /// Check the sidecar against the configuration of the current run.
    pub fn verify(&self, train_config_digest: &str, augmentation_digest: &str) -> Result<(), BackboneError> {
        for (field, expected, found) in [
            ("train_config_digest", &self.sidecar.train_config_digest, train_config_digest),
            ("augmentation_digest", &self.sidecar.augmentation_digest, augmentation_digest),
        ] {
            if expected != found {
                return Err(BackboneError::DigestMismatch {
                    field,
                    expected: expected.clone(),
                    found: found.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Rebuild the model and load the stored parameters (head included).
    pub fn restore(&self) -> Result<Model, BackboneError> {
        let mut spec = self.sidecar.model_spec.clone();
        spec.pretrained = false;
        let mut model = build_model(&spec)?;
        model.load_weights(&self.weights)?;
        model.spec = self.sidecar.model_spec.clone();
        Ok(model)
    }
}
