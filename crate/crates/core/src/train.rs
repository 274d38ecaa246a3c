//! Mini-batch Adam fine-tuning with early stopping on validation macro F1.

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{images_to_tensor, predict_proba, BackboneError, Checkpoint, Model};
use crate::dataset::{ClassLabel, DatasetManifest, ImageRecord, Split};
use crate::metrics::{evaluate, MetricsError, MetricsReport, PredictionSet};
use crate::par::Parallelism;
use crate::preprocess::{load_image, Normalization, PreprocessError, Tensor3, INPUT_SIDE};
use crate::seed::{rng_for, sha256_hex};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("split {0} has no records")]
    EmptySplit(&'static str),
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("logits and labels differ in length ({logits} vs {labels})")]
    LengthMismatch { logits: usize, labels: usize },
    #[error("cannot read {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: PreprocessError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Minimum gain in validation macro F1 that counts as an improvement.
    pub min_delta: f64,
    pub global_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            max_epochs: 50,
            early_stop_patience: 15,
            min_delta: 1e-6,
            global_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.early_stop_patience == 0 || self.early_stop_patience > self.max_epochs {
            return bad("early_stop_patience must lie in [1, max_epochs]");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn check_lengths(n_logits: usize, n_labels: usize) -> Result<(), TrainError> {
    if n_logits != n_labels || n_logits == 0 {
        return Err(TrainError::LengthMismatch {
            logits: n_logits,
            labels: n_labels,
        });
    }
    Ok(())
}

fn log_softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(logits: &[[f64; 2]], labels: &[ClassLabel]) -> Result<f64, TrainError> {
    check_lengths(logits.len(), labels.len())?;
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteLogits);
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, y)| -log_softmax(*z)[y.index()])
        .sum();
    Ok(total / logits.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `(softmax(z) - onehot(y)) / B`.
pub fn cross_entropy_grad(logits: &[[f64; 2]], labels: &[ClassLabel]) -> Result<Vec<[f64; 2]>, TrainError> {
    check_lengths(logits.len(), labels.len())?;
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteLogits);
    }
    let b = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(z, y)| {
            let lp = log_softmax(*z);
            let mut g = [lp[0].exp() / b, lp[1].exp() / b];
            g[y.index()] -= 1.0 / b;
            g
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub wall_secs: f64,
    /// SHA-256 of the epoch's batch composition.
    #[serde(default)]
    pub batch_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    /// `(epoch, val macro F1)` at each checkpoint write.
    pub checkpoints: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("log serializes");
        std::fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(io)?;
        serde_json::from_str(&text).map_err(|e| io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }
}

/// Patience bookkeeping for a maximized score.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        match self.best {
            Some((_, best)) if score <= best + self.min_delta => {}
            _ => {
                self.best = Some((epoch, score));
                return Verdict::Improved;
            }
        }
        let (best_epoch, _) = self.best.expect("set above");
        if epoch - best_epoch >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

/// Scores produced by one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochScores {
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

/// Drive epochs until patience runs out or `max_epochs` is reached.
/// `run_epoch(epoch)` trains one epoch and returns its scores;
/// `on_improve(epoch, f1)` runs whenever validation F1 strictly improves.
pub fn drive_epochs<E>(
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    mut run_epoch: impl FnMut(usize) -> Result<(EpochScores, String), E>,
    mut on_improve: impl FnMut(usize, f64) -> Result<(), E>,
) -> Result<TrainLog, E> {
    let mut stopper = EarlyStopping::new(patience, min_delta);
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=max_epochs {
        let start = Instant::now();
        let (scores, batch_digest) = run_epoch(epoch)?;
        let verdict = stopper.observe(epoch, scores.val_macro_f1);
        if verdict == Verdict::Improved {
            on_improve(epoch, scores.val_macro_f1)?;
            checkpoints.push((epoch, scores.val_macro_f1));
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: scores.mean_loss,
            val_accuracy: scores.val_accuracy,
            val_macro_f1: scores.val_macro_f1,
            wall_secs: start.elapsed().as_secs_f64(),
            batch_digest,
        });
        tracing::info!(
            epoch,
            loss = scores.mean_loss,
            val_acc = scores.val_accuracy,
            val_f1 = scores.val_macro_f1,
            "epoch done"
        );
        if verdict == Verdict::Stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, best_val_macro_f1) = stopper.best().unwrap_or((0, 0.0));
    Ok(TrainLog {
        epochs,
        stop_reason,
        best_epoch,
        best_val_macro_f1,
        checkpoints,
    })
}

/// Seed-shuffled mini-batches of indices `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, global_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(global_seed, "train/shuffle", epoch as u64));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn batch_digest(records: &[&ImageRecord], batches: &[Vec<usize>]) -> String {
    let mut text = String::new();
    for batch in batches {
        for &i in batch {
            text.push_str(&records[i].id);
            text.push(',');
        }
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

fn load_batch(records: &[&ImageRecord], idx: &[usize], par: Parallelism) -> Result<Vec<Tensor3>, TrainError> {
    par.try_map(idx, |&i| {
        let r = records[i];
        load_image(&r.path, INPUT_SIDE).map_err(|source| TrainError::Image {
            path: r.path.clone(),
            source,
        })
    })
}

/// Runtime settings that do not affect results.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub checkpoint_dir: PathBuf,
    pub augmentation_digest: String,
    pub parallelism: Parallelism,
    /// Batches decoded ahead of the training step.
    pub prefetch: usize,
    pub normalization: Normalization,
}

impl TrainOptions {
    pub fn new(checkpoint_dir: impl Into<PathBuf>, augmentation_digest: impl Into<String>) -> Self {
        Self {
            checkpoint_dir: checkpoint_dir.into(),
            augmentation_digest: augmentation_digest.into(),
            parallelism: Parallelism::default(),
            prefetch: 2,
            normalization: Normalization::default(),
        }
    }
}

/// Score every record of `split` with the model in inference mode.
pub fn predict_split(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    opts: &TrainOptions,
) -> Result<PredictionSet, TrainError> {
    let records: Vec<&ImageRecord> = manifest.records_in(split).collect();
    let mut scores = Vec::with_capacity(records.len());
    let all: Vec<usize> = (0..records.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let imgs = load_batch(&records, chunk, opts.parallelism)?;
        scores.extend(predict_proba(model, &imgs, &opts.normalization)?.into_iter().map(|p| p[1]));
    }
    Ok(PredictionSet::from_scores(
        records.iter().map(|r| r.id.clone()).collect(),
        records.iter().map(|r| r.label).collect(),
        scores,
    )?)
}

pub fn evaluate_split(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    opts: &TrainOptions,
) -> Result<(PredictionSet, MetricsReport), TrainError> {
    let preds = predict_split(model, manifest, split, batch_size, opts)?;
    let report = evaluate(&preds)?;
    Ok((preds, report))
}

fn train_epoch(
    model: &Model,
    opt: &mut AdamW,
    records: &[&ImageRecord],
    batches: &[Vec<usize>],
    epoch: usize,
    opts: &TrainOptions,
) -> Result<f64, TrainError> {
    let device = model.device().clone();
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel(opts.prefetch.max(1));
        let loader = scope.spawn(move || {
            for idx in batches {
                let batch = load_batch(records, idx, opts.parallelism).and_then(|imgs| {
                    let x = images_to_tensor(&imgs, &opts.normalization, &device)?;
                    let y: Vec<u32> = idx.iter().map(|&i| records[i].label.code()).collect();
                    Ok((x, Tensor::new(y, &device)?))
                });
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        let mut total = 0.0;
        let mut seen = 0usize;
        for (b, batch) in rx.iter().enumerate() {
            let (x, y) = batch?;
            let logits = model.forward_t(&x, true)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, batch: b + 1 });
            }
            opt.backward_step(&loss)?;
            let n = y.dim(0)?;
            total += value * n as f64;
            seen += n;
        }
        loader.join().expect("loader thread panicked");
        Ok(total / seen.max(1) as f64)
    })
}

/// Fine-tune `model` on the TRAIN split, selecting on INTERNAL_VAL macro F1.
/// Returns the best checkpoint and the model holds the best weights on exit.
pub fn train_loop(
    model: &Model,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    let train: Vec<&ImageRecord> = manifest.records_in(Split::Train).collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit("TRAIN"));
    }
    if manifest.records_in(Split::InternalVal).next().is_none() {
        return Err(TrainError::EmptySplit("INTERNAL_VAL"));
    }
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        weight_decay: 0.0,
        ..ParamsAdamW::default()
    };
    let mut opt = AdamW::new(model.trainable_vars(), params)?;
    let digest = cfg.digest();
    let best_dir = opts.checkpoint_dir.join("best");
    let mut best: Option<Checkpoint> = None;

    let log = drive_epochs(
        cfg.max_epochs,
        cfg.early_stop_patience,
        cfg.min_delta,
        |epoch| {
            let batches = epoch_batches(train.len(), cfg.batch_size, cfg.global_seed, epoch);
            let mean_loss = train_epoch(model, &mut opt, &train, &batches, epoch, opts)?;
            let (_, report) = evaluate_split(model, manifest, Split::InternalVal, cfg.batch_size, opts)?;
            let scores = EpochScores {
                mean_loss,
                val_accuracy: report.accuracy,
                val_macro_f1: report.macro_f1,
            };
            Ok::<_, TrainError>((scores, batch_digest(&train, &batches)))
        },
        |epoch, f1| {
            best = Some(Checkpoint::save(
                model,
                &best_dir,
                &digest,
                &opts.augmentation_digest,
                epoch,
                f1,
                cfg.global_seed,
            )?);
            Ok(())
        },
    )?;
    let best = best.expect("first epoch always checkpoints");
    model.load_weights(&best.weights)?;
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{All, Hem};

    #[test]
    fn closed_form_losses() {
        assert!((cross_entropy(&[[0.0, 0.0]], &[Hem]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[[0.0, 0.0]], &[All]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&[[1.0, 2.0]], &[All]).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let l = cross_entropy(&[[1000.0, -1000.0]], &[Hem]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(cross_entropy(&[[f64::NAN, 0.0]], &[Hem]), Err(TrainError::NonFiniteLogits)));
        assert!(matches!(cross_entropy(&[[f64::INFINITY, 0.0]], &[Hem]), Err(TrainError::NonFiniteLogits)));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let g = cross_entropy_grad(&[[0.3, -1.2], [2.0, 2.0]], &[Hem, All]).unwrap();
        for row in g {
            assert!((row[0] + row[1]).abs() < 1e-15);
        }
    }

    fn scripted(scores: &[f64], patience: usize, max_epochs: usize) -> TrainLog {
        drive_epochs::<()>(
            max_epochs,
            patience,
            1e-6,
            |e| {
                let f1 = scores[e - 1];
                Ok((
                    EpochScores {
                        mean_loss: 0.0,
                        val_accuracy: f1,
                        val_macro_f1: f1,
                    },
                    String::new(),
                ))
            },
            |_, _| Ok(()),
        )
        .unwrap()
    }

    #[test]
    fn plateau_stops_after_patience() {
        let log = scripted(&[0.6, 0.7, 0.7, 0.7], 2, 50);
        assert_eq!(log.stop_reason, StopReason::EarlyStop);
        assert_eq!(log.last_epoch(), 4);
        assert_eq!(log.best_epoch, 2);
    }

    #[test]
    fn increasing_scores_run_to_max() {
        let scores: Vec<f64> = (1..=50).map(|i| i as f64 / 100.0).collect();
        let log = scripted(&scores, 15, 50);
        assert_eq!(log.stop_reason, StopReason::MaxEpochs);
        assert_eq!(log.best_epoch, 50);
        assert_eq!(log.checkpoints.len(), 50);
    }

    #[test]
    fn float_noise_is_not_improvement() {
        let log = scripted(&[0.5, 0.5 + 1e-9, 0.5 + 2e-9], 2, 10);
        assert_eq!(log.best_epoch, 1);
        assert_eq!(log.last_epoch(), 3);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 3, 5, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 5, 1));
        assert_ne!(b, epoch_batches(10, 3, 5, 2));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.early_stop_patience = 51;
        assert!(c.validate().is_err());
        c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
