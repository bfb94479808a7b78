//! Signal-level evaluation: scale-invariant SDR, log-spectral distance and
//! segmental SNR per file, aggregated into a report grouped by mixture SNR
//! and noise category.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, LoadedPair, ManifestEntry, Split};
use crate::dsp::{self, DspError, StftConfig, WaveBuffer};
use crate::model::Predictor;
use crate::tensor::{Real, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error("silent reference: {0}")]
    SilentReference(String),
    #[error("missing materialized files:{}", format_paths(.0))]
    MissingFiles(Vec<PathBuf>),
    #[error("invalid metrics input: {0}")]
    Invalid(String),
}

fn format_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| format!("\n  {}", p.display()))
        .collect()
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Scores above this are reported as the clamp itself, so that a perfect
/// reconstruction (infinite ratio) still aggregates to a finite mean.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Additive floor inside the log-magnitude terms of [`lsd`].
pub const LSD_EPS: f64 = 1e-8;

/// Segmental SNR frame length and hop, in samples.
pub const SEG_FRAME: usize = 512;
pub const SEG_HOP: usize = 256;

/// Per-frame segmental SNR is clamped to this range before averaging.
pub const SEG_SNR_RANGE_DB: (f64, f64) = (-10.0, 35.0);

fn check_lengths(est: &WaveBuffer, reference: &WaveBuffer) -> Result<usize> {
    if est.is_empty() || reference.is_empty() {
        return Err(MetricsError::Invalid(
            "metrics need nonempty estimate and reference".into(),
        ));
    }
    if est.sample_rate_hz != reference.sample_rate_hz {
        return Err(MetricsError::Invalid(format!(
            "sample rates differ: {} vs {} Hz",
            est.sample_rate_hz, reference.sample_rate_hz
        )));
    }
    Ok(est.len().min(reference.len()))
}

/// Scale-invariant signal-to-distortion ratio in dB. The estimate is
/// projected onto the reference; the ratio of projected to residual energy
/// is reported, clamped to +-[`SI_SDR_CLAMP_DB`] so that exact (or exactly
/// orthogonal) reconstructions stay finite. Both buffers are cropped to the
/// shorter length first. A silent reference is rejected.
pub fn si_sdr(est: &WaveBuffer, reference: &WaveBuffer) -> Result<f64> {
    let n = check_lengths(est, reference)?;
    let e = &est.samples[..n];
    let r = &reference.samples[..n];

    let ref_energy: f64 = r.iter().map(|s| s * s).sum();
    if ref_energy == 0.0 {
        return Err(MetricsError::SilentReference(
            "si_sdr reference has zero energy".into(),
        ));
    }
    let dot: f64 = e.iter().zip(r).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;

    let mut target_energy = 0.0;
    let mut residual_energy = 0.0;
    for (a, b) in e.iter().zip(r) {
        let t = alpha * b;
        let d = a - t;
        target_energy += t * t;
        residual_energy += d * d;
    }

    // A silent estimate zeroes both energies; treat it as all-residual.
    let (lo, hi) = (-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB);
    if target_energy == 0.0 {
        return Ok(lo);
    }
    if residual_energy == 0.0 {
        return Ok(hi);
    }
    Ok((10.0 * (target_energy / residual_energy).log10()).clamp(lo, hi))
}

/// Log-spectral distance in dB: mean over frames of the RMS over frequency
/// bins of the difference of `20*log10(|S| + eps)` magnitudes. Nonnegative;
/// 0 exactly when the spectrograms match. Both buffers are cropped to the
/// shorter length before analysis.
pub fn lsd(est: &WaveBuffer, reference: &WaveBuffer, config: &StftConfig) -> Result<f64> {
    let n = check_lengths(est, reference)?;
    let crop = |w: &WaveBuffer| WaveBuffer::new(w.samples[..n].to_vec(), w.sample_rate_hz);
    let se = dsp::stft(&crop(est)?, config)?;
    let sr = dsp::stft(&crop(reference)?, config)?;

    let (bins, frames) = (se.bins(), se.frames());
    let log_mag = |s: &dsp::RISpectrogram, f: usize, t: usize| {
        let (re, im) = (s.re(f, t), s.im(f, t));
        20.0 * ((re * re + im * im).sqrt() + LSD_EPS).log10()
    };

    let mut total = 0.0;
    for t in 0..frames {
        let mut sq = 0.0;
        for f in 0..bins {
            let d = log_mag(&se, f, t) - log_mag(&sr, f, t);
            sq += d * d;
        }
        total += (sq / bins as f64).sqrt();
    }
    Ok(total / frames as f64)
}

/// Segmental SNR in dB: the mean over [`SEG_FRAME`]-sample frames (hop
/// [`SEG_HOP`]) of `10*log10(ref_energy / error_energy)`, each frame clamped
/// to [`SEG_SNR_RANGE_DB`]. Frames where the reference is silent are
/// skipped; a reference with no audible frame is rejected. Signals shorter
/// than one frame are scored as a single whole-signal frame.
pub fn seg_snr(est: &WaveBuffer, reference: &WaveBuffer) -> Result<f64> {
    let n = check_lengths(est, reference)?;
    let e = &est.samples[..n];
    let r = &reference.samples[..n];

    let frame = SEG_FRAME.min(n);
    let (lo, hi) = SEG_SNR_RANGE_DB;
    let mut total = 0.0;
    let mut frames = 0usize;
    let mut start = 0;
    while start + frame <= n {
        let ref_energy: f64 = r[start..start + frame].iter().map(|s| s * s).sum();
        if ref_energy > 0.0 {
            let err_energy: f64 = e[start..start + frame]
                .iter()
                .zip(&r[start..start + frame])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let db = if err_energy == 0.0 {
                hi
            } else {
                (10.0 * (ref_energy / err_energy).log10()).clamp(lo, hi)
            };
            total += db;
            frames += 1;
        }
        start += SEG_HOP;
    }
    if frames == 0 {
        return Err(MetricsError::SilentReference(
            "seg_snr reference is silent in every frame".into(),
        ));
    }
    Ok(total / frames as f64)
}

/// The three per-file scores for one estimate/reference pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    pub seg_snr_db: f64,
}

impl FileMetrics {
    fn measure(est: &WaveBuffer, reference: &WaveBuffer, stft: &StftConfig) -> Result<Self> {
        Ok(FileMetrics {
            si_sdr_db: si_sdr(est, reference)?,
            lsd_db: lsd(est, reference, stft)?,
            seg_snr_db: seg_snr(est, reference)?,
        })
    }

    fn mean(items: impl Iterator<Item = Self> + Clone) -> Self {
        let count = items.clone().count().max(1) as f64;
        let mut sum = FileMetrics {
            si_sdr_db: 0.0,
            lsd_db: 0.0,
            seg_snr_db: 0.0,
        };
        for m in items {
            sum.si_sdr_db += m.si_sdr_db;
            sum.lsd_db += m.lsd_db;
            sum.seg_snr_db += m.seg_snr_db;
        }
        FileMetrics {
            si_sdr_db: sum.si_sdr_db / count,
            lsd_db: sum.lsd_db / count,
            seg_snr_db: sum.seg_snr_db / count,
        }
    }
}

/// Scores for one test entry: the raw mixture and the enhanced estimate,
/// both against the clean reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub id: String,
    pub snr_db: f64,
    pub noise_category: String,
    pub noisy: FileMetrics,
    pub enhanced: FileMetrics,
    /// Reserved for externally computed scores; never produced here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pesq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

/// Per-(snr, noise category) arithmetic means over the group's files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub snr_db: f64,
    pub noise_category: String,
    pub file_count: usize,
    pub noisy: FileMetrics,
    pub enhanced: FileMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pesq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

/// Full evaluation: one row per test entry plus grouped and overall means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In manifest order; every test entry appears exactly once.
    pub files: Vec<FileReport>,
    /// Sorted by (snr_db, noise_category).
    pub groups: Vec<GroupReport>,
    pub overall_noisy: FileMetrics,
    pub overall_enhanced: FileMetrics,
}

/// How [`evaluate`] produces the estimate that is scored against the clean
/// reference.
pub enum Enhancer<'a, F: Real> {
    /// Score the noisy mixture itself (the untreated baseline column).
    Passthrough,
    /// Analysis, model enhancement, then synthesis back to the waveform.
    Model(&'a Predictor<F>),
}

fn enhance_waveform<F: Real>(pred: &Predictor<F>, noisy: &WaveBuffer) -> Result<WaveBuffer> {
    let spec = dsp::stft(noisy, &pred.cfg.stft)?;
    let out = pred.enhance(&spec)?;
    Ok(dsp::istft(&out, noisy.len())?)
}

/// Score every test entry of `entries` under `root`, with the estimate
/// produced by `enhancer`; `metric_stft` is the analysis setting for the
/// log-spectral distance. All referenced files are checked up front and
/// missing ones are reported together; a partial report is never produced.
/// Files are scored in parallel; the report itself is assembled in manifest
/// order, so identical inputs yield identical reports.
pub fn evaluate<F: Real>(
    root: &Path,
    entries: &[ManifestEntry],
    enhancer: &Enhancer<'_, F>,
    metric_stft: &StftConfig,
) -> Result<EvalReport> {
    let test_entries: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .collect();
    if test_entries.is_empty() {
        return Err(MetricsError::Invalid(
            "the manifest has no test entries to evaluate".into(),
        ));
    }

    let missing: Vec<PathBuf> = test_entries
        .iter()
        .flat_map(|e| {
            let (noisy, clean) = dataset::pair_paths(root, e);
            [noisy, clean]
        })
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingFiles(missing));
    }

    let pairs = dataset::load_split(root, entries, Split::Test)?;

    let files: Vec<FileReport> = pairs
        .par_iter()
        .map(|pair: &LoadedPair| {
            let entry = &entries[pair.entry_index];
            let noisy = FileMetrics::measure(&pair.noisy, &pair.clean, metric_stft)?;
            let enhanced = match enhancer {
                Enhancer::Passthrough => noisy,
                Enhancer::Model(pred) => {
                    let est = enhance_waveform(pred, &pair.noisy)?;
                    FileMetrics::measure(&est, &pair.clean, metric_stft)?
                }
            };
            Ok(FileReport {
                id: entry.id(),
                snr_db: entry.snr_db,
                noise_category: entry.noise_category.clone(),
                noisy,
                enhanced,
                pesq: None,
                wer: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut grouped: Vec<(f64, String, Vec<&FileReport>)> = Vec::new();
    for f in &files {
        let slot = grouped
            .iter_mut()
            .find(|(s, c, _)| *s == f.snr_db && *c == f.noise_category);
        match slot {
            Some((_, _, members)) => members.push(f),
            None => grouped.push((f.snr_db, f.noise_category.clone(), vec![f])),
        }
    }
    grouped.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("manifest snr values are finite")
            .then_with(|| a.1.cmp(&b.1))
    });
    let groups = grouped
        .into_iter()
        .map(|(snr_db, noise_category, members)| GroupReport {
            snr_db,
            noise_category,
            file_count: members.len(),
            noisy: FileMetrics::mean(members.iter().map(|f| f.noisy)),
            enhanced: FileMetrics::mean(members.iter().map(|f| f.enhanced)),
            pesq: None,
            wer: None,
        })
        .collect();

    Ok(EvalReport {
        overall_noisy: FileMetrics::mean(files.iter().map(|f| f.noisy)),
        overall_enhanced: FileMetrics::mean(files.iter().map(|f| f.enhanced)),
        files,
        groups,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail") + "\n"
    }

    /// Aligned plain-text table: one row per (snr, noise category) group,
    /// noisy and enhanced means side by side, plus an overall row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8}  {:<12} {:>5}  {:>12} {:>12}  {:>9} {:>9}  {:>12} {:>12}",
            "snr_db",
            "noise",
            "files",
            "si_sdr noisy",
            "si_sdr enh",
            "lsd noisy",
            "lsd enh",
            "segsnr noisy",
            "segsnr enh",
        );
        let row = |out: &mut String,
                   label: String,
                   category: &str,
                   count: usize,
                   noisy: &FileMetrics,
                   enh: &FileMetrics| {
            let _ = writeln!(
                out,
                "{:>8}  {:<12} {:>5}  {:>12.2} {:>12.2}  {:>9.2} {:>9.2}  {:>12.2} {:>12.2}",
                label,
                category,
                count,
                noisy.si_sdr_db,
                enh.si_sdr_db,
                noisy.lsd_db,
                enh.lsd_db,
                noisy.seg_snr_db,
                enh.seg_snr_db,
            );
        };
        for g in &self.groups {
            row(
                &mut out,
                format!("{:.1}", g.snr_db),
                &g.noise_category,
                g.file_count,
                &g.noisy,
                &g.enhanced,
            );
        }
        row(
            &mut out,
            "all".into(),
            "-",
            self.files.len(),
            &self.overall_noisy,
            &self.overall_enhanced,
        );
        out
    }
}
