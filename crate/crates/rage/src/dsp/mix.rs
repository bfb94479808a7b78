//! Deterministic mixing of clean speech with noise at an exact SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DspError, Result, WaveBuffer};

/// Mixture plus the exact ingredients that produced it.
#[derive(Debug, Clone)]
pub struct MixOutput {
    pub noisy: WaveBuffer,
    /// Noise segment after SNR gain (and peak rescale, when applied); adding
    /// it to the equally rescaled clean reproduces `noisy` exactly.
    pub scaled_noise: WaveBuffer,
    /// SNR gain applied to the raw noise segment.
    pub gain: f64,
    /// Factor the mixture was divided by to keep |noisy| ≤ 1; 1.0 when no
    /// rescale was needed. The clean reference must be divided by the same
    /// factor before comparing against `noisy`.
    pub peak_rescale: f64,
}

fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Mixture `clean + g * noise_segment` with `g` chosen so the clean-to-noise
/// RMS ratio hits `snr_db` exactly. Short noise loops; long noise contributes
/// a seed-deterministic slice. Mixtures that leave [-1, 1] are rescaled by
/// their peak, recorded in [`MixOutput::peak_rescale`].
pub fn mix_at_snr(
    clean: &WaveBuffer,
    noise: &WaveBuffer,
    snr_db: f64,
    seed: u64,
) -> Result<MixOutput> {
    if clean.sample_rate_hz != noise.sample_rate_hz {
        return Err(DspError::Invalid(format!(
            "sample rate mismatch: clean {} Hz vs noise {} Hz",
            clean.sample_rate_hz, noise.sample_rate_hz
        )));
    }
    if clean.is_empty() || clean.rms() == 0.0 {
        return Err(DspError::Invalid("clean signal is silent".into()));
    }
    if noise.is_empty() || noise.rms() == 0.0 {
        return Err(DspError::Invalid("noise signal is silent".into()));
    }

    let len = clean.len();
    let segment: Vec<f64> = if noise.len() < len {
        (0..len).map(|i| noise.samples[i % noise.len()]).collect()
    } else if noise.len() > len {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset = rng.gen_range(0..=noise.len() - len);
        noise.samples[offset..offset + len].to_vec()
    } else {
        noise.samples.clone()
    };
    let seg_rms = rms(&segment);
    if seg_rms == 0.0 {
        return Err(DspError::Invalid(
            "selected noise segment is silent; cannot reach the requested SNR".into(),
        ));
    }

    let gain = clean.rms() / seg_rms * 10f64.powf(-snr_db / 20.0);
    let mut scaled: Vec<f64> = segment.iter().map(|s| s * gain).collect();
    let mut noisy: Vec<f64> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, n)| c + n)
        .collect();

    let peak = noisy.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let peak_rescale = if peak > 1.0 {
        for s in noisy.iter_mut() {
            *s /= peak;
        }
        for s in scaled.iter_mut() {
            *s /= peak;
        }
        peak
    } else {
        1.0
    };

    Ok(MixOutput {
        noisy: WaveBuffer::new(noisy, clean.sample_rate_hz)?,
        scaled_noise: WaveBuffer::new(scaled, clean.sample_rate_hz)?,
        gain,
        peak_rescale,
    })
}
