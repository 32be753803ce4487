//! Mini-batch training with dual-loss checkpointing and multi-seed sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonet::{
    adam_update, backward, forward, init_params, mse, predict, save_params, AdamState, AutonetError, LrSchedule,
    NetworkArch, NetworkParams,
};
use crate::dataset::SampleRecord;

/// Final train losses above this mark a run as not converged.
pub const NON_CONVERGENCE_LOSS: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Network(#[from] AutonetError),
    #[error("run {arch} (seed {seed}) never saved a checkpoint: {status:?}")]
    NoCheckpoint {
        arch: String,
        seed: u64,
        status: RunStatus,
        run: Box<TrainRun>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size_train: usize,
    pub batch_size_val: usize,
    pub max_epochs: usize,
    /// Seeds weight initialization and, on a separate stream, shuffling.
    pub seed: u64,
    pub shuffle: bool,
    pub lr: LrSchedule,
    /// Abort once the train loss exceeds this multiple of its first value.
    pub divergence_factor: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size_train: 4096,
            batch_size_val: 8192,
            max_epochs: 500,
            seed: 0,
            shuffle: true,
            lr: LrSchedule::default(),
            divergence_factor: 1e3,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size_train == 0 || self.batch_size_val == 0 {
            return Err(TrainError::InvalidHyper("batch sizes must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidHyper("max_epochs must be at least 1".into()));
        }
        if !(self.lr.initial > 0.0 && self.lr.factor > 0.0 && self.lr.period > 0) {
            return Err(TrainError::InvalidHyper(format!("learning rate schedule {:?}", self.lr)));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(TrainError::InvalidHyper("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Rows as 64-bit matrices: inputs `n x 6`, targets `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl TrainData {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let n = records.len();
        Self {
            inputs: Array2::from_shape_fn((n, 6), |(i, j)| records[i].inputs[j] as f64),
            targets: Array2::from_shape_fn((n, 1), |(i, _)| records[i].target as f64),
        }
    }

    pub fn concat(parts: &[&TrainData]) -> Self {
        let inputs: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.inputs.view()).collect();
        let targets: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.targets.view()).collect();
        Self {
            inputs: ndarray::concatenate(Axis(0), &inputs).unwrap_or_else(|_| Array2::zeros((0, 6))),
            targets: ndarray::concatenate(Axis(0), &targets).unwrap_or_else(|_| Array2::zeros((0, 1))),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, name: &str, arch: &NetworkArch) -> Result<(), TrainError> {
        if self.is_empty() {
            return Err(TrainError::Data(format!("{name} set is empty")));
        }
        if self.inputs.ncols() != arch.input_dim || self.targets.ncols() != arch.output_dim {
            return Err(TrainError::Data(format!("{name} set has the wrong width")));
        }
        if self.targets.nrows() != self.inputs.nrows() {
            return Err(TrainError::Data(format!("{name} set has mismatched row counts")));
        }
        Ok(())
    }
}

/// Number of batches an epoch over `rows` takes; the last may be partial.
pub fn batch_count(rows: usize, batch_size: usize) -> usize {
    rows.div_ceil(batch_size.max(1))
}

/// Size-weighted mean MSE of `params` over `data`, evaluated in batches.
pub fn evaluate_loss(params: &NetworkParams, data: &TrainData, batch_size: usize) -> Result<f64, AutonetError> {
    let batch_size = batch_size.max(1);
    let mut weighted = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let pred = predict(params, data.inputs.slice(ndarray::s![start..end, ..]))?;
        let (loss, _) = mse(pred.view(), data.targets.slice(ndarray::s![start..end, ..]))?;
        weighted += loss * (end - start) as f64;
        start = end;
    }
    Ok(weighted / data.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub train: f64,
    pub val: f64,
}

/// One pass over the training rows followed by a validation pass. The train
/// loss is the size-weighted mean of the per-batch losses seen while the
/// weights move.
pub fn epoch(
    params: &mut NetworkParams,
    adam: &mut AdamState,
    train: &TrainData,
    val: &TrainData,
    hyper: &TrainHyper,
    epoch_index: usize,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<EpochLosses, AutonetError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    if hyper.shuffle {
        order.shuffle(shuffle_rng);
    }
    let lr = hyper.lr.at(epoch_index);
    let mut weighted = 0.0;
    for chunk in order.chunks(hyper.batch_size_train) {
        let x = train.inputs.select(Axis(0), chunk);
        let y = train.targets.select(Axis(0), chunk);
        let (pred, cache) = forward(params, x.view())?;
        let (loss, grad) = mse(pred.view(), y.view())?;
        let grads = backward(params, &cache, grad.view())?;
        adam_update(params, &grads, adam, lr)?;
        weighted += loss * chunk.len() as f64;
    }
    Ok(EpochLosses {
        train: weighted / train.len() as f64,
        val: evaluate_loss(params, val, hyper.batch_size_val)?,
    })
}

/// Save only when both losses strictly improve on their best values so far.
/// The bests are the running minima of each curve, so every save is a strict
/// minimum of both curves over all earlier epochs.
pub fn checkpoint_rule(train_loss: f64, val_loss: f64, best_train: f64, best_val: f64) -> bool {
    train_loss < best_train && val_loss < best_val
}

/// Divergence guard on the epoch train loss.
pub fn diverged(train_loss: f64, initial: f64, factor: f64) -> bool {
    train_loss > factor * initial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, loss: f64, initial: f64 },
    NonFinite { epoch: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub arch: NetworkArch,
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epochs at which the weights were saved.
    pub saved_epochs: Vec<usize>,
    /// Losses recorded at the last saved epoch.
    pub best_train: f64,
    pub best_val: f64,
    /// Loss of the saved weights over the whole training set after training.
    pub saved_model_train_loss: f64,
    pub epoch_seconds: Vec<f64>,
    pub status: RunStatus,
}

impl TrainRun {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }

    /// Checks that every saved epoch strictly improved both losses over all
    /// earlier epochs; returns the first offending epoch.
    pub fn audit_checkpoints(&self) -> Result<(), usize> {
        for &e in &self.saved_epochs {
            let prior_train = self.train_loss[..e].iter().cloned().fold(f64::INFINITY, f64::min);
            let prior_val = self.val_loss[..e].iter().cloned().fold(f64::INFINITY, f64::min);
            if !(self.train_loss[e] < prior_train && self.val_loss[e] < prior_val) {
                return Err(e);
            }
        }
        if self.saved_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(self.saved_epochs[0]);
        }
        Ok(())
    }

    /// `epoch,train_loss,val_loss,saved` rows. Wall times are left out so
    /// the curve is reproducible byte for byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,saved\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let saved = self.saved_epochs.binary_search(&e).is_ok() as u8;
            let _ = writeln!(out, "{e},{t:e},{v:e},{saved}");
        }
        out
    }
}

/// Weights of the last saved epoch, held at checkpoint precision so they
/// match what a reload of the checkpoint returns.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: NetworkParams,
    pub epoch: usize,
}

/// Checkpoint file name for a saved epoch.
pub fn checkpoint_name(arch: &NetworkArch, seed: u64, epoch: usize) -> String {
    format!("{}_seed{seed}_epoch{epoch:04}.sfnn", arch.label())
}

/// Trains `arch` from a fresh initialization. When `checkpoint_dir` is given
/// every saved epoch is also written there.
pub fn train(
    train_data: &TrainData,
    val_data: &TrainData,
    arch: NetworkArch,
    hyper: &TrainHyper,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainRun), TrainError> {
    hyper.validate()?;
    train_from(train_data, val_data, init_params(arch, hyper.seed)?, hyper, checkpoint_dir)
}

/// As [`train`], starting from `initial` weights with a fresh optimizer.
pub fn train_from(
    train_data: &TrainData,
    val_data: &TrainData,
    initial: NetworkParams,
    hyper: &TrainHyper,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, TrainRun), TrainError> {
    hyper.validate()?;
    let arch = initial.arch;
    train_data.check("training", &arch)?;
    val_data.check("validation", &arch)?;
    let mut params = initial;
    let mut adam = AdamState::new(&arch);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    shuffle_rng.set_stream(1);

    let mut run = TrainRun {
        arch,
        seed: hyper.seed,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        saved_epochs: Vec::new(),
        best_train: f64::INFINITY,
        best_val: f64::INFINITY,
        saved_model_train_loss: f64::NAN,
        epoch_seconds: Vec::new(),
        status: RunStatus::Completed,
    };
    let mut saved: Option<TrainedModel> = None;
    let mut initial = None;
    let (mut min_train, mut min_val) = (f64::INFINITY, f64::INFINITY);

    for e in 0..hyper.max_epochs {
        let start = Instant::now();
        let losses = match epoch(&mut params, &mut adam, train_data, val_data, hyper, e, &mut shuffle_rng) {
            Ok(l) => l,
            Err(err @ AutonetError::NonFiniteGradient { .. }) => {
                run.status = RunStatus::NonFinite { epoch: e, message: err.to_string() };
                break;
            }
            Err(err) => return Err(err.into()),
        };
        run.epoch_seconds.push(start.elapsed().as_secs_f64());
        if !(losses.train.is_finite() && losses.val.is_finite()) {
            run.status = RunStatus::NonFinite {
                epoch: e,
                message: format!("train loss {}, validation loss {}", losses.train, losses.val),
            };
            break;
        }
        run.train_loss.push(losses.train);
        run.val_loss.push(losses.val);
        let first = *initial.get_or_insert(losses.train);
        if diverged(losses.train, first, hyper.divergence_factor) {
            run.status = RunStatus::Diverged { epoch: e, loss: losses.train, initial: first };
            break;
        }
        let save = checkpoint_rule(losses.train, losses.val, min_train, min_val);
        min_train = min_train.min(losses.train);
        min_val = min_val.min(losses.val);
        if save {
            run.best_train = losses.train;
            run.best_val = losses.val;
            run.saved_epochs.push(e);
            if let Some(dir) = checkpoint_dir {
                save_params(&params, Some(e), &dir.join(checkpoint_name(&arch, hyper.seed, e)))?;
            }
            saved = Some(TrainedModel { params: params.rounded_to_f32(), epoch: e });
        }
    }

    match saved {
        Some(model) => {
            run.saved_model_train_loss = evaluate_loss(&model.params, train_data, hyper.batch_size_val)?;
            Ok((model, run))
        }
        None => Err(TrainError::NoCheckpoint {
            arch: arch.label(),
            seed: hyper.seed,
            status: run.status.clone(),
            run: Box::new(run),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub arch: NetworkArch,
    pub seed: u64,
    /// Train and validation loss of the saved weights; `None` when the run
    /// produced no model.
    pub final_train: Option<f64>,
    pub final_val: Option<f64>,
    pub mean_epoch_seconds: f64,
    pub status: RunStatus,
    pub non_converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSummary {
    pub arch: NetworkArch,
    pub label: String,
    pub completed_runs: usize,
    pub mean_train: f64,
    pub var_train: f64,
    pub mean_val: f64,
    pub var_val: f64,
    pub mean_epoch_seconds: f64,
    /// True if any run of this architecture ended above
    /// [`NON_CONVERGENCE_LOSS`] or failed outright.
    pub non_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<SweepEntry>,
    pub summaries: Vec<ArchSummary>,
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Trains every `(arch, seed)` pair; runs execute in parallel with isolated
/// state. Failed runs are recorded, not propagated.
pub fn run_sweep(
    train_data: &TrainData,
    val_data: &TrainData,
    archs: &[NetworkArch],
    seeds: &[u64],
    hyper: &TrainHyper,
    checkpoint_dir: Option<&Path>,
) -> Result<SweepReport, TrainError> {
    if archs.is_empty() || seeds.is_empty() {
        return Err(TrainError::InvalidHyper("a sweep needs at least one architecture and one seed".into()));
    }
    hyper.validate()?;
    let jobs: Vec<(NetworkArch, u64)> = archs.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let runs: Vec<SweepEntry> = jobs
        .par_iter()
        .map(|&(arch, seed)| {
            let hyper = TrainHyper { seed, ..hyper.clone() };
            match train(train_data, val_data, arch, &hyper, None) {
                Ok((model, run)) => {
                    let mut checkpoint = None;
                    let mut error = None;
                    if let Some(dir) = checkpoint_dir {
                        let path = dir.join(checkpoint_name(&arch, seed, model.epoch));
                        match save_params(&model.params, Some(model.epoch), &path) {
                            Ok(()) => checkpoint = Some(path),
                            Err(e) => error = Some(e.to_string()),
                        }
                    }
                    SweepEntry {
                        arch,
                        seed,
                        final_train: Some(run.saved_model_train_loss),
                        final_val: Some(run.best_val),
                        mean_epoch_seconds: run.mean_epoch_seconds(),
                        non_converged: !(run.saved_model_train_loss <= NON_CONVERGENCE_LOSS),
                        status: run.status,
                        checkpoint,
                        error,
                    }
                }
                Err(err) => {
                    let (status, seconds) = match &err {
                        TrainError::NoCheckpoint { status, run, .. } => (status.clone(), run.mean_epoch_seconds()),
                        other => (RunStatus::NonFinite { epoch: 0, message: other.to_string() }, 0.0),
                    };
                    SweepEntry {
                        arch,
                        seed,
                        final_train: None,
                        final_val: None,
                        mean_epoch_seconds: seconds,
                        status,
                        non_converged: true,
                        checkpoint: None,
                        error: Some(err.to_string()),
                    }
                }
            }
        })
        .collect();

    let summaries = archs
        .iter()
        .map(|&arch| {
            let mine: Vec<&SweepEntry> = runs.iter().filter(|r| r.arch == arch).collect();
            let train: Vec<f64> = mine.iter().filter_map(|r| r.final_train).collect();
            let val: Vec<f64> = mine.iter().filter_map(|r| r.final_val).collect();
            let (mean_train, var_train) = mean_and_variance(&train);
            let (mean_val, var_val) = mean_and_variance(&val);
            let seconds: Vec<f64> = mine.iter().map(|r| r.mean_epoch_seconds).collect();
            ArchSummary {
                arch,
                label: arch.label(),
                completed_runs: train.len(),
                mean_train,
                var_train,
                mean_val,
                var_val,
                mean_epoch_seconds: mean_and_variance(&seconds).0,
                non_converged: mine.iter().any(|r| r.non_converged),
            }
        })
        .collect();
    Ok(SweepReport { runs, summaries })
}
