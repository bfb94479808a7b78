//! Checkpoint binary format.
//!
//! Layout: magic `RAGE`, little-endian u32 format version, u32-length-
//! prefixed UTF-8 metadata JSON, then each tensor in ascending name order
//! as (u32 name length, name bytes, u8 rank, u64 extents, f32 data), all
//! integers and floats little-endian, closed by a CRC32 of every preceding
//! byte. Tensor data is stored as f32 regardless of the training precision,
//! so f32 training round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::tensor::Real;
use crate::model::Predictor;
use crate::trainer::{Adam, EarlyStopping, Result, TrainConfig, TrainerError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAGE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state at one epoch boundary: configs, early-stopping
/// bookkeeping, every parameter, and the optimizer moments (`opt.m.<name>`,
/// `opt.v.<name>`). All run randomness derives from `(rng_seed, epoch)`
/// streams, so these two fields are the entire RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs completed when this state was captured.
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub rng_seed: u64,
    pub opt_step: u64,
    /// Name → (shape, values), parameters and optimizer moments together.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

/// JSON head of the file. `best_val_loss` travels as raw bits so the
/// save→load→save cycle is byte-identical even for infinities.
#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    best_epoch: usize,
    best_val_loss_bits: u64,
    epochs_since_best: usize,
    rng_seed: u64,
    opt_step: u64,
}

impl Checkpoint {
    pub fn best_val_loss(&self) -> f64 {
        self.stopper.best_val_loss
    }

    /// Snapshot the live model and optimizer, downcasting values to f32.
    pub fn capture<F: Real>(
        model: &Predictor<F>,
        adam: &Adam<F>,
        train: &TrainConfig,
        epoch: usize,
        stopper: &EarlyStopping,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for p in model.parameters() {
            let shape = p.tensor.shape().to_vec();
            let data: Vec<f32> = p.tensor.data().iter().map(|v| v.as_f32()).collect();
            let moment_shape = vec![p.tensor.numel()];
            if let Some(m) = adam.m.get(&p.name) {
                let m32: Vec<f32> = m.iter().map(|v| v.as_f32()).collect();
                tensors.insert(format!("opt.m.{}", p.name), (moment_shape.clone(), m32));
            }
            if let Some(v) = adam.v.get(&p.name) {
                let v32: Vec<f32> = v.iter().map(|v| v.as_f32()).collect();
                tensors.insert(format!("opt.v.{}", p.name), (moment_shape, v32));
            }
            tensors.insert(p.name, (shape, data));
        }
        Checkpoint {
            model: model.cfg.clone(),
            train: *train,
            epoch,
            stopper: *stopper,
            rng_seed: train.seed,
            opt_step: adam.step_count,
            tensors,
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = Meta {
        model: ckpt.model.clone(),
        train: ckpt.train,
        epoch: ckpt.epoch,
        best_epoch: ckpt.stopper.best_epoch,
        best_val_loss_bits: ckpt.stopper.best_val_loss.to_bits(),
        epochs_since_best: ckpt.stopper.epochs_since_best,
        rng_seed: ckpt.rng_seed,
        opt_step: ckpt.opt_step,
    };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| TrainerError::Format(format!("metadata serialization: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(meta_json.as_bytes());
    for (name, (shape, data)) in &ckpt.tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &extent in shape {
            push_u64(&mut buf, extent as u64);
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TrainerError::Format(format!(
                "tensor {name}: shape {shape:?} does not cover {} values",
                data.len()
            )));
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    fs::write(path, buf).map_err(|source| TrainerError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainerError::Format(format!("truncated checkpoint while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| TrainerError::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(TrainerError::Format("file too short to be a checkpoint".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(TrainerError::Format(format!(
            "CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(TrainerError::Format("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainerError::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: Meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| TrainerError::Format(format!("metadata JSON: {e}")))?;

    let mut tensors = BTreeMap::new();
    while !cur.done() {
        let name_len = cur.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| TrainerError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let extent = cur.u64(&format!("extents of {name}"))? as usize;
            numel = numel.checked_mul(extent).ok_or_else(|| {
                TrainerError::Format(format!("tensor {name}: extent overflow"))
            })?;
            shape.push(extent);
        }
        let raw = cur.take(numel * 4, &format!("data of {name}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(TrainerError::Format(format!("duplicate tensor {name}")));
        }
    }

    Ok(Checkpoint {
        stopper: EarlyStopping {
            patience: meta.train.patience,
            best_val_loss: f64::from_bits(meta.best_val_loss_bits),
            best_epoch: meta.best_epoch,
            epochs_since_best: meta.epochs_since_best,
        },
        model: meta.model,
        train: meta.train,
        epoch: meta.epoch,
        rng_seed: meta.rng_seed,
        opt_step: meta.opt_step,
        tensors,
    })
}
