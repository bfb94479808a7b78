//! Speech enhancement with attention-gated and reverse-attention U-Nets:
//! autodiff engine, STFT front end, model, dataset tooling, training loop
//! and evaluation metrics.

pub mod dataset;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
