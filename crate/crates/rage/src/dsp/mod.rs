//! Waveform I/O, STFT analysis/synthesis and SNR-exact mixing.
//!
//! Everything here is pure f64 signal processing; the network-facing packing
//! of spectrograms into batched tensors lives with the trainer.

mod mix;
mod stft;
mod wav;

use thiserror::Error;

use crate::tensor::Tensor;

pub use mix::{mix_at_snr, MixOutput};
pub use stft::{istft, stft};
pub use wav::{read_wav, write_wav};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav format: {0}")]
    Format(String),
    #[error("stft config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio in [-1, 1] at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(DspError::Invalid("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(DspError::Invalid(format!("non-finite sample {bad}")));
        }
        Ok(WaveBuffer {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Root-mean-square level; 0 for empty audio.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|s| s * s).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

/// Analysis parameters shared by [`stft`] and [`istft`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { n_fft: 512, hop: 128 }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig { n_fft, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.n_fft % 2 != 0 {
            return Err(DspError::Config(format!(
                "n_fft must be a positive even number, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.n_fft % self.hop != 0 || self.hop > self.n_fft / 2 {
            return Err(DspError::Config(format!(
                "hop {} must divide n_fft {} and be at most half of it",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    /// Number of frequency bins of the one-sided spectrum.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for `len` input samples (after the centered
    /// reflect padding).
    pub fn frames(&self, len: usize) -> usize {
        len.max(self.n_fft) / self.hop + 1
    }

    /// Periodic Hann window of length `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let n = self.n_fft as f64;
        (0..self.n_fft)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }
}

/// Real/imaginary packed one-sided spectrogram: channel 0 holds the real
/// plane, channel 1 the imaginary plane, each `bins x frames`.
#[derive(Debug, Clone)]
pub struct RISpectrogram {
    pub data: Tensor<f64>,
    pub config: StftConfig,
    pub sample_rate_hz: u32,
}

impl RISpectrogram {
    pub fn bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn re(&self, f: usize, t: usize) -> f64 {
        self.data.data()[f * self.frames() + t]
    }

    pub fn im(&self, f: usize, t: usize) -> f64 {
        let ft = self.bins() * self.frames();
        self.data.data()[ft + f * self.frames() + t]
    }
}
