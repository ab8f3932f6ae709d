//! Training engine: class-balanced batches over manifest entries with
//! lazily extracted patch stacks, SGD with momentum on a halving
//! schedule, CNN pretraining with early stopping, and a second phase
//! that trains the sequence model with the convolutional submodule
//! shared across slices (optionally frozen).
//!
//! Batch gradients are reduced over fixed-size chunks summed in chunk
//! order, so results are bit-identical for any worker count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{CnnBaseline, CnnBaselineConfig, CnnClassifier, Model, RectNet, RectNetConfig};
use crate::neural::loss::nll;
use crate::neural::optim::{lr_at, SgdMomentum};
use crate::neural::params::{accumulate, Tensors};
use crate::neural::scalar::Scalar;
use crate::sampler::{stack_for_entry, DatasetManifest, ManifestEntry, PatchStack};
use crate::volume::{read_volume, Volume};

/// Samples per reduction chunk; fixed so the summation order does not
/// depend on thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub val_fraction: f64,
    /// Pretraining stops after this many epochs without validation
    /// improvement.
    pub patience: usize,
    pub freeze_cnn: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            pretrain_epochs: 4,
            epochs: 8,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.7,
            val_fraction: 0.1,
            patience: 5,
            freeze_cnn: false,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub phase: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub log: Vec<EpochLog>,
    /// Validation loss of the returned weights.
    pub final_val_loss: f64,
    pub final_val_accuracy: f64,
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("phase,epoch,lr,train_loss,val_loss,val_accuracy\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.phase, row.epoch, row.lr, row.train_loss, row.val_loss, row.val_accuracy
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Manifest plus its volumes, resident in memory.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub volumes: Vec<Volume>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut volumes = Vec::with_capacity(manifest.header.volumes.len());
        for vref in &manifest.header.volumes {
            volumes.push(read_volume(&resolve(&base, &vref.volume))?);
        }
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.volume >= volumes.len() {
                return Err(Error::Format {
                    path: manifest_path.to_path_buf(),
                    reason: format!("entry {i} references volume {}", e.volume),
                });
            }
            if e.label > 1 {
                return Err(Error::Format {
                    path: manifest_path.to_path_buf(),
                    reason: format!("entry {i} label {}", e.label),
                });
            }
        }
        Ok(LoadedDataset { manifest, volumes })
    }

    pub fn stack(&self, entry: &ManifestEntry, input_size: usize, k: usize) -> Result<PatchStack> {
        stack_for_entry(&self.volumes[entry.volume], entry, input_size, k)
    }
}

/// Paths in a manifest resolve against the manifest's directory unless
/// absolute.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Anything trainable on labeled patch stacks.
pub trait StackClassifier<S: Scalar>: Tensors<S> + Clone + Send + Sync {
    type Cache;
    fn forward_stack(&self, stack: &PatchStack) -> (Vec<S>, Self::Cache);
    /// `freeze_features` skips gradients into the convolutional
    /// submodule where the architecture supports it.
    fn backward_stack(
        &self,
        cache: &Self::Cache,
        label: usize,
        scale: S,
        grads: &mut Self,
        freeze_features: bool,
    );
    fn zero_grads(&self) -> Self;
}

impl<S: Scalar> StackClassifier<S> for RectNet<S> {
    type Cache = crate::models::RectNetCache<S>;
    fn forward_stack(&self, stack: &PatchStack) -> (Vec<S>, Self::Cache) {
        self.forward(stack)
    }
    fn backward_stack(
        &self,
        cache: &Self::Cache,
        label: usize,
        scale: S,
        grads: &mut Self,
        freeze_features: bool,
    ) {
        self.backward(cache, label, scale, grads, freeze_features);
    }
    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }
}

impl<S: Scalar> StackClassifier<S> for CnnBaseline<S> {
    type Cache = crate::models::CnnBaselineCache<S>;
    fn forward_stack(&self, stack: &PatchStack) -> (Vec<S>, Self::Cache) {
        self.forward(stack)
    }
    fn backward_stack(
        &self,
        cache: &Self::Cache,
        label: usize,
        scale: S,
        grads: &mut Self,
        _freeze_features: bool,
    ) {
        self.backward(cache, label, scale, grads);
    }
    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }
}

impl<S: Scalar> StackClassifier<S> for CnnClassifier<S> {
    type Cache = crate::models::CnnClassifierCache<S>;
    fn forward_stack(&self, stack: &PatchStack) -> (Vec<S>, Self::Cache) {
        self.forward(stack)
    }
    fn backward_stack(
        &self,
        cache: &Self::Cache,
        label: usize,
        scale: S,
        grads: &mut Self,
        _freeze_features: bool,
    ) {
        self.backward(cache, label, scale, grads);
    }
    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }
}

/// Split entry indices into train and validation by seeded shuffle.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    indices.shuffle(&mut rng);
    let val_n = if val_fraction > 0.0 {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1))
    } else {
        0
    };
    let val = indices[..val_n].to_vec();
    let train = indices[val_n..].to_vec();
    (train, val)
}

/// Equal turns from each class queue; the leftover tail of the longer
/// class is dropped for the epoch.
pub(crate) fn balanced_batches(
    labels: &[u8],
    train: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut pos: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyDataset(
            "training split lacks one of the classes".into(),
        ));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let half = batch_size / 2;
    let pairs = pos.len().min(neg.len());
    let n_batches = (pairs / half).max(1);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let lo = b * half;
        let hi = ((b + 1) * half).min(pairs);
        if lo >= hi {
            break;
        }
        let mut batch = Vec::with_capacity((hi - lo) * 2);
        for i in lo..hi {
            batch.push(pos[i]);
            batch.push(neg[i]);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Forward/backward over one batch with deterministic chunked gradient
/// reduction. Returns the mean loss; gradients land in `grads`, already
/// scaled by 1/batch.
fn batch_step<M: StackClassifier<f32>>(
    model: &M,
    data: &LoadedDataset,
    batch: &[usize],
    input_size: usize,
    k: usize,
    freeze: bool,
    grads: &mut M,
) -> Result<f64> {
    let scale = 1.0f32 / batch.len() as f32;
    let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
    let results: Vec<Result<(f64, M)>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut local = model.zero_grads();
            let mut loss_sum = 0.0f64;
            for &idx in *chunk {
                let entry = &data.manifest.entries[idx];
                let stack = data.stack(entry, input_size, k)?;
                let label = entry.label as usize;
                let (probs, cache) = model.forward_stack(&stack);
                if !probs.iter().all(|p| p.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "non-finite probabilities on entry {idx}"
                    )));
                }
                loss_sum += nll(&probs, label).to_f64();
                model.backward_stack(&cache, label, scale, &mut local, freeze);
            }
            Ok((loss_sum, local))
        })
        .collect();
    let mut total_loss = 0.0f64;
    for r in results {
        let (loss_sum, local) = r?;
        total_loss += loss_sum;
        accumulate(grads, &local);
    }
    Ok(total_loss / batch.len() as f64)
}

/// Mean loss and accuracy over the given entries.
fn evaluate<M: StackClassifier<f32>>(
    model: &M,
    data: &LoadedDataset,
    entries: &[usize],
    input_size: usize,
    k: usize,
) -> Result<(f64, f64)> {
    if entries.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let chunks: Vec<&[usize]> = entries.chunks(CHUNK).collect();
    let results: Vec<Result<(f64, usize)>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;
            for &idx in *chunk {
                let entry = &data.manifest.entries[idx];
                let stack = data.stack(entry, input_size, k)?;
                let label = entry.label as usize;
                let (probs, _) = model.forward_stack(&stack);
                loss_sum += nll(&probs, label).to_f64();
                let predicted = if probs[1] > probs[0] { 1 } else { 0 };
                if predicted == label {
                    correct += 1;
                }
            }
            Ok((loss_sum, correct))
        })
        .collect();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for r in results {
        let (l, c) = r?;
        loss += l;
        correct += c;
    }
    Ok((loss / entries.len() as f64, correct as f64 / entries.len() as f64))
}

struct PhaseOutcome<M> {
    best_model: M,
    best_val_loss: f64,
    best_val_accuracy: f64,
}

/// Train one model for `epochs` epochs, tracking the best validation
/// snapshot. Early-stops after `patience` epochs without improvement
/// when `patience > 0`.
#[allow(clippy::too_many_arguments)]
fn train_phase<M: StackClassifier<f32>>(
    mut model: M,
    phase: &'static str,
    data: &LoadedDataset,
    train: &[usize],
    val: &[usize],
    opts: &TrainOptions,
    epochs: usize,
    input_size: usize,
    k: usize,
    freeze: bool,
    patience: usize,
    log: &mut Vec<EpochLog>,
) -> Result<PhaseOutcome<M>> {
    let labels: Vec<u8> = data.manifest.entries.iter().map(|e| e.label).collect();
    let mut opt: SgdMomentum<f32> = SgdMomentum::new(opts.momentum);
    let mut best: Option<(f64, f64, M)> = None;
    let mut since_best = 0usize;

    for epoch in 0..epochs {
        let lr = lr_at(epoch, epochs, opts.lr);
        let phase_tag = phase.as_bytes()[0] as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ phase_tag,
        );
        let batches = balanced_batches(&labels, train, opts.batch_size, &mut rng)?;
        let mut epoch_loss = 0.0f64;
        for batch in &batches {
            let mut grads = model.zero_grads();
            let loss = batch_step(&model, data, batch, input_size, k, freeze, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "{phase} epoch {epoch}: batch loss {loss}"
                )));
            }
            epoch_loss += loss;
            opt.step(&mut model, &grads, lr as f32);
        }
        epoch_loss /= batches.len() as f64;

        let (val_loss, val_acc) = if val.is_empty() {
            (epoch_loss, f64::NAN)
        } else {
            evaluate(&model, data, val, input_size, k)?
        };
        log.push(EpochLog {
            phase,
            epoch,
            lr,
            train_loss: epoch_loss,
            val_loss,
            val_accuracy: val_acc,
        });

        let improved = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, val_acc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if patience > 0 && since_best >= patience {
                break;
            }
        }
    }

    let (best_val_loss, best_val_accuracy, best_model) =
        best.expect("at least one epoch ran");
    Ok(PhaseOutcome {
        best_model,
        best_val_loss,
        best_val_accuracy,
    })
}

fn check_input_compat(data: &LoadedDataset, k: usize) -> Result<()> {
    if data.manifest.entries.is_empty() {
        return Err(Error::EmptyDataset("manifest has no entries".into()));
    }
    if data.manifest.header.k != k {
        return Err(Error::InvalidConfig(format!(
            "manifest k = {} but model k = {}",
            data.manifest.header.k, k
        )));
    }
    Ok(())
}

/// Two-phase training of the hybrid model: pretrain the convolutional
/// submodule as a standalone classifier on center patches, transplant
/// it, then train the full sequence model.
pub fn train_rectnet(
    data: &LoadedDataset,
    config: &RectNetConfig,
    opts: &TrainOptions,
) -> Result<(Model<f32>, TrainArtifacts)> {
    opts.validate()?;
    config.validate()?;
    check_input_compat(data, config.k)?;
    let n = data.manifest.entries.len();
    let (train, val) = split_train_val(n, opts.val_fraction, opts.seed);
    let mut log = Vec::new();

    let mut model: RectNet<f32> = RectNet::new(config, opts.seed)?;

    if opts.pretrain_epochs > 0 {
        let classifier = CnnClassifier::new(model.cnn.clone(), config.feature_dim, opts.seed ^ 1);
        let outcome = train_phase(
            classifier,
            "pretrain",
            data,
            &train,
            &val,
            opts,
            opts.pretrain_epochs,
            config.input_size,
            config.k,
            false,
            opts.patience,
            &mut log,
        )?;
        model.cnn = outcome.best_model.cnn;
    }

    let outcome = train_phase(
        model,
        "sequence",
        data,
        &train,
        &val,
        opts,
        opts.epochs,
        config.input_size,
        config.k,
        opts.freeze_cnn,
        0,
        &mut log,
    )?;

    Ok((
        Model::RectNet(outcome.best_model),
        TrainArtifacts {
            log,
            final_val_loss: outcome.best_val_loss,
            final_val_accuracy: outcome.best_val_accuracy,
        },
    ))
}

/// Single-phase training of the multi-channel CNN baseline.
pub fn train_baseline(
    data: &LoadedDataset,
    config: &CnnBaselineConfig,
    opts: &TrainOptions,
) -> Result<(Model<f32>, TrainArtifacts)> {
    opts.validate()?;
    config.validate()?;
    check_input_compat(data, config.k)?;
    let n = data.manifest.entries.len();
    let (train, val) = split_train_val(n, opts.val_fraction, opts.seed);
    let mut log = Vec::new();

    let model: CnnBaseline<f32> = CnnBaseline::new(config, opts.seed)?;
    let outcome = train_phase(
        model,
        "baseline",
        data,
        &train,
        &val,
        opts,
        opts.epochs,
        config.input_size,
        config.k,
        false,
        0,
        &mut log,
    )?;

    Ok((
        Model::CnnBaseline(outcome.best_model),
        TrainArtifacts {
            log,
            final_val_loss: outcome.best_val_loss,
            final_val_accuracy: outcome.best_val_accuracy,
        },
    ))
}
