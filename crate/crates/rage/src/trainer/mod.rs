//! Training loop: composite spectrogram loss, Adam with global-norm
//! gradient clipping, strict-improvement early stopping, and bit-exact
//! checkpointing so a resumed run reproduces a straight-through one.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{derive_seed, epoch_batches, DatasetError, EpochBatch, LoadedPair};
use crate::model::{input_scale, pad_to_multiple, HeadInit, Predictor};
use crate::tensor::{param_tensor, Real, Tensor, TensorError};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("non-finite gradient in {param}; aborting epoch")]
    NonFiniteGradient { param: String },
    #[error("invalid training request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Magnitude floor inside sqrt(re² + im² + ε), keeping the loss
/// differentiable at exact zeros.
pub const MAG_EPS: f64 = 1e-9;

/// Global L2 norm above which gradients are rescaled before the update.
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    RiMse,
    RiMsePlusMag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            patience: 50,
            learning_rate: 1e-3,
            batch_size: 2,
            segment_seconds: 2.0,
            seed: 0,
            loss_kind: LossKind::RiMsePlusMag,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(TrainerError::Invalid("max_epochs must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(TrainerError::Invalid(format!(
                "patience {} must be smaller than max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainerError::Invalid(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::Invalid("batch size must be positive".into()));
        }
        if !(self.segment_seconds.is_finite() && self.segment_seconds > 0.0) {
            return Err(TrainerError::Invalid(format!(
                "segment length {}s must be positive",
                self.segment_seconds
            )));
        }
        Ok(())
    }
}

/// Spectrogram regression loss over [N, 2, F, T] tensors. `RiMse` is the
/// mean squared error over both channels; `RiMsePlusMag` adds half the mean
/// squared magnitude error so amplitude fidelity is not traded away for
/// phase-cancelling residuals.
pub fn loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, kind: LossKind) -> Result<Tensor<F>> {
    let diff = pred.sub(target)?;
    let ri = diff.mul(&diff)?.mean()?;
    match kind {
        LossKind::RiMse => Ok(ri),
        LossKind::RiMsePlusMag => {
            let mag_diff = pred.magnitude_ri(MAG_EPS)?.sub(&target.magnitude_ri(MAG_EPS)?)?;
            let mag = mag_diff.mul(&mag_diff)?.mean()?;
            Ok(ri.add(&mag.mul_scalar(F::of(0.5)))?)
        }
    }
}

// ── optimizer ────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction; moments are kept per parameter name so they
/// can round-trip through checkpoints.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub learning_rate: f64,
    pub step_count: u64,
    pub m: HashMap<String, Vec<F>>,
    pub v: HashMap<String, Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, step_count: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// One update over `(name, tensor, gradient)` triples. Gradients must
    /// already be clipped; every parameter must come with one.
    pub fn step(&mut self, grads: &[(String, Tensor<F>, Vec<F>)]) -> Result<Vec<(String, Tensor<F>)>> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
        let (nb1, nb2) = (F::of(1.0 - ADAM_BETA1), F::of(1.0 - ADAM_BETA2));

        let mut updated = Vec::with_capacity(grads.len());
        for (name, tensor, grad) in grads {
            if grad.len() != tensor.numel() {
                return Err(TrainerError::Invalid(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    grad.len(),
                    tensor.numel()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![F::zero(); grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![F::zero(); grad.len()]);
            let mut data = tensor.data().to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + nb1 * g;
                v[i] = b2 * v[i] + nb2 * g * g;
                let m_hat = m[i].as_f64() / bc1;
                let v_hat = v[i].as_f64() / bc2;
                let delta = self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                data[i] = data[i] - F::of(delta);
            }
            updated.push((name.clone(), param_tensor(data, tensor.shape())?));
        }
        Ok(updated)
    }
}

/// Scale factor that caps the global L2 norm of all gradients at
/// [`GRAD_CLIP_NORM`]; 1.0 when already inside the ball.
pub fn clip_scale<F: Real>(grads: &[(String, Tensor<F>, Vec<F>)]) -> Result<f64> {
    let mut sq = 0.0;
    for (name, _, grad) in grads {
        for g in grad {
            let g = g.as_f64();
            if !g.is_finite() {
                return Err(TrainerError::NonFiniteGradient { param: name.clone() });
            }
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    Ok(if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 })
}

// ── early stopping ───────────────────────────────────────────────

/// Strict-improvement early stopping: only `val < best` (tolerance zero)
/// resets the patience counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            StopDecision::Improved
        } else {
            self.epochs_since_best += 1;
            if self.epochs_since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

// ── training loop ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Patience => "patience",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
}

pub struct FitOutput {
    pub report: TrainingReport,
    /// Model and optimizer as of the best validation epoch.
    pub best: Checkpoint,
    /// Model and optimizer as of the final epoch, for resuming.
    pub last: Checkpoint,
}

/// Stream tag for validation crops: fixed across epochs so validation
/// losses are comparable from epoch to epoch.
const VAL_STREAM: u64 = u64::MAX;

/// Stack one batch of spectrogram pairs into network tensors. Each example
/// is scaled by the RMS of its noisy spectrogram (the clean target by the
/// same factor, so the regression stays consistent), then zero-padded to
/// multiples of 2^depth.
pub fn batch_to_tensors<F: Real>(
    batch: &EpochBatch,
    depth: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let n = batch.pairs.len();
    if n == 0 {
        return Err(TrainerError::Invalid("empty batch".into()));
    }
    let shape = batch.pairs[0].0.data.shape().to_vec();
    let (bins, frames) = (shape[1], shape[2]);
    let unit = 1usize << depth;
    let (fp, tp) = (pad_to_multiple(bins, unit), pad_to_multiple(frames, unit));
    let mut noisy = vec![F::zero(); n * 2 * fp * tp];
    let mut clean = vec![F::zero(); n * 2 * fp * tp];
    for (i, (noisy_spec, clean_spec)) in batch.pairs.iter().enumerate() {
        if noisy_spec.data.shape() != shape || clean_spec.data.shape() != shape {
            return Err(TrainerError::Invalid("ragged batch extents".into()));
        }
        let scale = input_scale(noisy_spec.data.data());
        for (dst, spec) in [(&mut noisy, noisy_spec), (&mut clean, clean_spec)] {
            let src = spec.data.data();
            for ch in 0..2 {
                for f in 0..bins {
                    for t in 0..frames {
                        dst[((i * 2 + ch) * fp + f) * tp + t] =
                            F::of(src[(ch * bins + f) * frames + t] / scale);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(noisy, &[n, 2, fp, tp])?,
        Tensor::from_vec(clean, &[n, 2, fp, tp])?,
    ))
}

/// Forward/backward/update over one batch; returns the batch loss.
fn train_batch<F: Real>(
    model: &mut Predictor<F>,
    adam: &mut Adam<F>,
    batch: &EpochBatch,
    kind: LossKind,
) -> Result<f64> {
    let depth = model.cfg.depth;
    let (noisy, clean) = batch_to_tensors::<F>(batch, depth)?;
    let out = model.forward(&noisy)?;
    let batch_loss = loss(&out.out, &clean, kind)?;
    let loss_value = batch_loss.data()[0].as_f64();
    batch_loss.backward()?;

    let mut grads = Vec::new();
    for p in model.parameters() {
        let grad = p.tensor.grad().ok_or_else(|| {
            TrainerError::Invalid(format!("parameter {} received no gradient", p.name))
        })?;
        grads.push((p.name, p.tensor, grad));
    }
    let scale = clip_scale(&grads)?;
    if scale != 1.0 {
        let s = F::of(scale);
        for (_, _, grad) in &mut grads {
            for g in grad.iter_mut() {
                *g = *g * s;
            }
        }
    }
    let updated: HashMap<String, Tensor<F>> = adam.step(&grads)?.into_iter().collect();
    for (name, slot) in model.parameter_slots() {
        let next = updated
            .get(&name)
            .ok_or_else(|| TrainerError::Invalid(format!("no update produced for {name}")))?;
        *slot = next.clone();
    }
    Ok(loss_value)
}

/// Mean loss over a split without touching gradients or parameters.
pub fn split_loss<F: Real>(
    model: &Predictor<F>,
    batches: &[EpochBatch],
    kind: LossKind,
) -> Result<f64> {
    let depth = model.cfg.depth;
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let (noisy, clean) = batch_to_tensors::<F>(batch, depth)?;
        let out = model.forward(&noisy)?;
        let l = loss(&out.out, &clean, kind)?.data()[0].as_f64();
        total += l * batch.pairs.len() as f64;
        count += batch.pairs.len();
    }
    Ok(total / count as f64)
}

/// Optimization state carried across a checkpoint boundary so a resumed
/// run continues exactly where the saved one stopped.
#[derive(Debug, Clone, Copy)]
pub struct ResumePoint {
    pub next_epoch: usize,
    pub stopper: EarlyStopping,
}

/// Train `model` until `max_epochs` or until validation loss fails to
/// improve for `patience` epochs. Epoch `e` draws all randomness from
/// streams of `(seed, e)`, so the loop is deterministic and resumable:
/// continuing from a checkpoint at epoch `k` replays exactly the epochs a
/// straight-through run would have seen.
pub fn fit<F: Real>(
    model: &mut Predictor<F>,
    adam: &mut Adam<F>,
    train_pairs: &[LoadedPair],
    val_pairs: &[LoadedPair],
    cfg: &TrainConfig,
    resume: Option<ResumePoint>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(TrainerError::Invalid("train and val splits must be non-empty".into()));
    }
    let start = Instant::now();
    let stft = model.cfg.stft;

    let val_batches = epoch_batches(
        val_pairs,
        cfg.batch_size,
        cfg.segment_seconds,
        stft,
        derive_seed(cfg.seed, VAL_STREAM),
    )?;

    // The checkpoint carries the stopping counters; the active config owns
    // the rule, so a resume may extend patience or max_epochs.
    let (first_epoch, mut stopper) = match resume {
        Some(r) => (r.next_epoch, EarlyStopping { patience: cfg.patience, ..r.stopper }),
        None => (1, EarlyStopping::new(cfg.patience)),
    };

    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in first_epoch..=cfg.max_epochs {
        let batches = epoch_batches(
            train_pairs,
            cfg.batch_size,
            cfg.segment_seconds,
            stft,
            derive_seed(cfg.seed, epoch as u64),
        )?;
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            total += train_batch(model, adam, batch, cfg.loss_kind)? * batch.pairs.len() as f64;
            count += batch.pairs.len();
        }
        let train_loss = total / count as f64;
        let val_loss = split_loss(model, &val_batches, cfg.loss_kind)?;
        epochs.push(EpochRecord { epoch, train_loss, val_loss });

        let decision = stopper.observe(epoch, val_loss);
        if decision == StopDecision::Improved {
            best = Some(Checkpoint::capture(model, adam, cfg, epoch, &stopper));
        }
        if decision == StopDecision::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let last_epoch = epochs.last().map_or(first_epoch.saturating_sub(1), |e| e.epoch);
    let last = Checkpoint::capture(model, adam, cfg, last_epoch, &stopper);
    let best = best.unwrap_or_else(|| last.clone());
    Ok(FitOutput {
        report: TrainingReport {
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_loss: stopper.best_val_loss,
            stop_reason,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        best,
        last,
    })
}

/// Rebuild a model and optimizer from a checkpoint, verifying every tensor
/// against the topology its config implies.
pub fn restore<F: Real>(ckpt: &Checkpoint) -> Result<(Predictor<F>, Adam<F>)> {
    let mut model = Predictor::new(ckpt.model.clone(), ckpt.rng_seed, HeadInit::Zero)?;
    let mut restored = 0usize;
    for (name, slot) in model.parameter_slots() {
        let (shape, data) = ckpt
            .tensors
            .get(&name)
            .ok_or_else(|| TrainerError::Format(format!("checkpoint is missing tensor {name}")))?;
        if shape != slot.shape() {
            return Err(TrainerError::Format(format!(
                "tensor {name}: checkpoint shape {shape:?} does not match model shape {:?}",
                slot.shape()
            )));
        }
        let cast: Vec<F> = data.iter().map(|&x| F::from_f32(x)).collect();
        *slot = param_tensor(cast, shape)?;
        restored += 1;
    }
    let param_sizes: HashMap<String, usize> =
        model.parameters().into_iter().map(|p| (p.name, p.tensor.numel())).collect();
    let mut adam = Adam::new(ckpt.train.learning_rate);
    adam.step_count = ckpt.opt_step;
    let mut accounted = restored;
    for (key, (_, data)) in &ckpt.tensors {
        let target = if let Some(name) = key.strip_prefix("opt.m.") {
            Some((&mut adam.m, name))
        } else if let Some(name) = key.strip_prefix("opt.v.") {
            Some((&mut adam.v, name))
        } else {
            None
        };
        if let Some((moments, name)) = target {
            match param_sizes.get(name) {
                Some(&numel) if numel == data.len() => {}
                Some(&numel) => {
                    return Err(TrainerError::Format(format!(
                        "optimizer moment {key} has {} values, parameter has {numel}",
                        data.len()
                    )));
                }
                None => {
                    return Err(TrainerError::Format(format!(
                        "optimizer moment {key} matches no model parameter"
                    )));
                }
            }
            moments.insert(name.to_string(), data.iter().map(|&x| F::from_f32(x)).collect());
            accounted += 1;
        }
    }
    if accounted != ckpt.tensors.len() {
        return Err(TrainerError::Format(format!(
            "checkpoint carries {} tensors that match neither a parameter nor a moment",
            ckpt.tensors.len() - accounted
        )));
    }
    Ok((model, adam))
}
