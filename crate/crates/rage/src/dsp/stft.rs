//! Centered STFT analysis and weighted overlap-add synthesis.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::Tensor;

use super::{DspError, RISpectrogram, Result, StftConfig, WaveBuffer};

/// Floor under the overlap-add window normalization; positions below it
/// cannot be divided out and make the requested synthesis ill-posed.
const NORM_FLOOR: f64 = 1e-10;

/// Signal extended by n_fft/2 reflected samples on each side, with a zero
/// tail first when the input is shorter than one window.
fn reflect_pad(samples: &[f64], n_fft: usize) -> Vec<f64> {
    let mut sig = samples.to_vec();
    if sig.len() < n_fft {
        sig.resize(n_fft, 0.0);
    }
    let pad = n_fft / 2;
    let l = sig.len();
    let mut out = Vec::with_capacity(l + 2 * pad);
    for i in 0..pad {
        out.push(sig[pad - i]);
    }
    out.extend_from_slice(&sig);
    for i in 0..pad {
        out.push(sig[l - 2 - i]);
    }
    out
}

/// Windowed one-sided DFT of every hop-spaced frame.
pub fn stft(wave: &WaveBuffer, config: &StftConfig) -> Result<RISpectrogram> {
    config.validate()?;
    let n_fft = config.n_fft;
    let bins = config.bins();
    let frames = config.frames(wave.len());
    let window = config.window();
    let padded = reflect_pad(&wave.samples, n_fft);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut data = vec![0.0f64; 2 * bins * frames];
    let (re_plane, im_plane) = data.split_at_mut(bins * frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let start = t * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            re_plane[f * frames + t] = buf[f].re;
            im_plane[f * frames + t] = buf[f].im;
        }
    }

    Ok(RISpectrogram {
        data: Tensor::from_vec(data, &[2, bins, frames])
            .map_err(|e| DspError::Invalid(e.to_string()))?,
        config: *config,
        sample_rate_hz: wave.sample_rate_hz,
    })
}

/// Weighted overlap-add inverse with window-squared normalization; the
/// returned buffer holds the first `out_len` samples of the original
/// (pre-padding) timeline.
pub fn istft(spec: &RISpectrogram, out_len: usize) -> Result<WaveBuffer> {
    spec.config.validate()?;
    let n_fft = spec.config.n_fft;
    let hop = spec.config.hop;
    let bins = spec.config.bins();
    let frames = spec.frames();
    if spec.bins() != bins {
        return Err(DspError::Invalid(format!(
            "spectrogram has {} bins but config expects {bins}",
            spec.bins()
        )));
    }
    let pad = n_fft / 2;
    let span = (frames - 1) * hop + n_fft;
    let max_len = span - pad;
    if out_len > max_len {
        return Err(DspError::Invalid(format!(
            "requested {out_len} samples but only {max_len} are reconstructable \
             from {frames} frames"
        )));
    }

    let window = spec.config.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut acc = vec![0.0f64; span];
    let mut norm = vec![0.0f64; span];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    for t in 0..frames {
        // rebuild the full spectrum from the one-sided half (real signal)
        for f in 0..bins {
            buf[f] = Complex::new(spec.re(f, t), spec.im(f, t));
        }
        for f in bins..n_fft {
            buf[f] = buf[n_fft - f].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let mut samples = Vec::with_capacity(out_len);
    for i in pad..pad + out_len {
        if norm[i] < NORM_FLOOR {
            return Err(DspError::Invalid(format!(
                "overlap-add normalization degenerate at sample {} ({} < {NORM_FLOOR})",
                i - pad,
                norm[i]
            )));
        }
        samples.push(acc[i] / norm[i]);
    }
    WaveBuffer::new(samples, spec.sample_rate_hz)
}
