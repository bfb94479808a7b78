//! Deterministic corpus construction: manifest planning, SNR mixing to
//! disk, and seeded batch assembly for training.
//!
//! The pipeline has three stages, each reproducible from a seed alone:
//! a manifest pairs every clean file with one noise category and one SNR
//! from the grid ([`build_manifest`]), [`materialize`] renders each pair to
//! `out/{split}/{noisy,clean}/<id>.wav`, and [`epoch_batches`] turns loaded
//! pairs into seeded random crops as spectrogram batches.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, read_wav, stft, write_wav, DspError, RISpectrogram, StftConfig, WaveBuffer};

#[cfg(test)]
mod tests;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("entry {id}: {source}")]
    Entry {
        id: String,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> DatasetError {
    let context = context.into();
    move |source| DatasetError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// One planned mixture. `(clean_path, noise_path, snr_db, seed)` uniquely
/// identifies it; `peak_rescale` stays 1.0 until materialization observes
/// clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub noise_category: String,
    pub snr_db: f64,
    pub seed: u64,
    pub split: Split,
    pub peak_rescale: f64,
}

impl ManifestEntry {
    /// Stable identifier used for output file names and error reporting.
    pub fn id(&self) -> String {
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "unnamed".into())
        };
        format!(
            "{}__{}__snr{}",
            stem(&self.clean_path),
            self.noise_category,
            self.snr_db
        )
    }
}

/// Planned manifest plus any non-fatal adjustments made along the way.
#[derive(Debug, Clone)]
pub struct ManifestPlan {
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

/// Fractions of clean files assigned to train/val/test; must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const ALL_TRAIN: SplitRatios = SplitRatios { train: 1.0, val: 0.0, test: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(DatasetError::Invalid(format!(
                    "{name} split ratio {r} outside [0, 1]"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Invalid(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// List the `.wav` files directly inside `dir`, sorted by path so directory
/// iteration order never leaks into the plan.
pub fn scan_wav_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let iter = fs::read_dir(dir).map_err(io_err(format!("reading {}", dir.display())))?;
    for entry in iter {
        let entry = entry.map_err(io_err(format!("reading {}", dir.display())))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decorrelate a stream of seeds drawn from one base seed: manifest entries,
/// per-epoch shuffles and crops all use distinct streams of the run seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noise_category(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".into())
}

/// Plan a manifest: shuffle the clean files under `seed`, deal them
/// round-robin across noise categories (so per-noise counts differ by at
/// most one), cycle each category through the SNR grid (per-SNR counts
/// within a category differ by at most one), and carve the shuffled order
/// into contiguous train/val/test ranges so no clean file straddles splits.
///
/// `per_noise_count` caps how many clean files each noise receives; when the
/// supply falls short the plan is truncated with a warning rather than
/// rejected.
pub fn build_manifest(
    clean_files: &[PathBuf],
    noise_files: &[PathBuf],
    snr_grid: &[f64],
    per_noise_count: Option<usize>,
    split_ratios: SplitRatios,
    seed: u64,
) -> Result<ManifestPlan> {
    if clean_files.is_empty() {
        return Err(DatasetError::Invalid("no clean files found".into()));
    }
    if noise_files.is_empty() {
        return Err(DatasetError::Invalid("no noise files found".into()));
    }
    if snr_grid.is_empty() {
        return Err(DatasetError::Invalid("empty SNR grid".into()));
    }
    if let Some(bad) = snr_grid.iter().find(|s| !s.is_finite()) {
        return Err(DatasetError::Invalid(format!("non-finite SNR {bad}")));
    }
    split_ratios.validate()?;
    if per_noise_count == Some(0) {
        return Err(DatasetError::Invalid("per-noise count must be positive".into()));
    }

    let mut warnings = Vec::new();
    let mut order: Vec<&PathBuf> = clean_files.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut used = order.len();
    if let Some(per_noise) = per_noise_count {
        let requested = per_noise * noise_files.len();
        if requested < used {
            used = requested;
        } else if requested > used {
            warnings.push(format!(
                "requested {requested} mixtures ({per_noise} per noise) but only {used} clean files are available; truncating"
            ));
        }
    }
    order.truncate(used);

    // Contiguous split boundaries over the shuffled order via cumulative
    // rounding, so counts track the ratios and every file lands in one split.
    let n = order.len() as f64;
    let train_end = (split_ratios.train * n).round() as usize;
    let val_end = ((split_ratios.train + split_ratios.val) * n).round() as usize;
    let split_of = |i: usize| {
        if i < train_end {
            Split::Train
        } else if i < val_end {
            Split::Val
        } else {
            Split::Test
        }
    };

    let mut snr_cursor = vec![0usize; noise_files.len()];
    let entries = order
        .iter()
        .enumerate()
        .map(|(i, clean)| {
            let noise_idx = i % noise_files.len();
            let snr = snr_grid[snr_cursor[noise_idx] % snr_grid.len()];
            snr_cursor[noise_idx] += 1;
            ManifestEntry {
                clean_path: (*clean).clone(),
                noise_path: noise_files[noise_idx].clone(),
                noise_category: noise_category(&noise_files[noise_idx]),
                snr_db: snr,
                seed: derive_seed(seed, i as u64),
                split: split_of(i),
                peak_rescale: 1.0,
            }
        })
        .collect();

    Ok(ManifestPlan { entries, warnings })
}

/// Serialize entries as JSON lines, one entry per line.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| DatasetError::Invalid(format!("manifest serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(no, line)| {
            serde_json::from_str(line).map_err(|e| {
                DatasetError::Invalid(format!("{}:{}: {e}", path.display(), no + 1))
            })
        })
        .collect()
}

/// Output of rendering one manifest entry to disk.
#[derive(Debug, Clone)]
pub struct MaterializedPair {
    /// The entry with `peak_rescale` replaced by the observed value.
    pub entry: ManifestEntry,
    pub noisy_path: PathBuf,
    pub clean_ref_path: PathBuf,
    /// SNR gain that was applied to the noise segment.
    pub gain: f64,
}

/// Canonical on-disk locations of an entry's noisy mixture and clean
/// reference: `root/{split}/{noisy,clean}/<id>.wav`.
pub fn pair_paths(root: &Path, entry: &ManifestEntry) -> (PathBuf, PathBuf) {
    let file = format!("{}.wav", entry.id());
    let base = root.join(entry.split.dir_name());
    (base.join("noisy").join(&file), base.join("clean").join(file))
}

/// Render one entry: mix at its SNR under its seed, then persist the noisy
/// mixture and the matching clean reference under
/// `root/{split}/{noisy,clean}/<id>.wav`. When the mixture was peak-rescaled
/// the clean reference is divided by the same factor, so the persisted pair
/// still exhibits the planned SNR exactly. Deterministic, hence idempotent.
pub fn materialize(entry: &ManifestEntry, root: &Path) -> Result<MaterializedPair> {
    let run = || -> Result<MaterializedPair> {
        let clean = read_wav(&entry.clean_path)?;
        let noise = read_wav(&entry.noise_path)?;
        let mix = dsp::mix_at_snr(&clean, &noise, entry.snr_db, entry.seed)?;

        let clean_ref = if mix.peak_rescale != 1.0 {
            let scaled = clean.samples.iter().map(|s| s / mix.peak_rescale).collect();
            WaveBuffer::new(scaled, clean.sample_rate_hz)?
        } else {
            clean
        };

        let (noisy_path, clean_ref_path) = pair_paths(root, entry);
        for path in [&noisy_path, &clean_ref_path] {
            let dir = path.parent().expect("pair paths always have a parent");
            fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        }
        write_wav(&noisy_path, &mix.noisy)?;
        write_wav(&clean_ref_path, &clean_ref)?;

        Ok(MaterializedPair {
            entry: ManifestEntry { peak_rescale: mix.peak_rescale, ..entry.clone() },
            noisy_path,
            clean_ref_path,
            gain: mix.gain,
        })
    };
    run().map_err(|e| DatasetError::Entry { id: entry.id(), source: Box::new(e) })
}

/// One noisy/clean waveform pair loaded back from a materialized corpus.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub noisy: WaveBuffer,
    pub clean: WaveBuffer,
    /// Index of the originating entry in the manifest slice it was loaded from.
    pub entry_index: usize,
}

/// Load every materialized pair of `split` back into memory, in manifest
/// order. Missing or malformed files fail with the entry identity attached.
pub fn load_split(root: &Path, entries: &[ManifestEntry], split: Split) -> Result<Vec<LoadedPair>> {
    let mut pairs = Vec::new();
    for (entry_index, entry) in entries.iter().enumerate() {
        if entry.split != split {
            continue;
        }
        let (noisy_path, clean_path) = pair_paths(root, entry);
        let load = || -> Result<LoadedPair> {
            Ok(LoadedPair {
                noisy: read_wav(&noisy_path)?,
                clean: read_wav(&clean_path)?,
                entry_index,
            })
        };
        pairs.push(load().map_err(|e| DatasetError::Entry {
            id: entry.id(),
            source: Box::new(e),
        })?);
    }
    if pairs.is_empty() {
        return Err(DatasetError::Invalid(format!("split {split} has no entries")));
    }
    Ok(pairs)
}

/// One training batch: parallel arrays over the batch dimension.
#[derive(Debug, Clone)]
pub struct EpochBatch {
    /// (noisy, clean) spectrogram pairs, identical extents within a batch.
    pub pairs: Vec<(RISpectrogram, RISpectrogram)>,
    /// Which loaded pair each crop came from.
    pub pair_indices: Vec<usize>,
    /// Sample offset of each crop within its source files.
    pub crop_offsets: Vec<usize>,
}

/// Assemble one epoch of batches: a seeded permutation of the pairs, one
/// seeded random crop of `segment_seconds` per pair, both waveforms cropped
/// at the same offset and STFT-transformed. The trailing short batch is
/// kept. Identical seeds reproduce identical batches, crops included.
pub fn epoch_batches(
    pairs: &[LoadedPair],
    batch_size: usize,
    segment_seconds: f64,
    stft_config: StftConfig,
    seed: u64,
) -> Result<Vec<EpochBatch>> {
    if pairs.is_empty() {
        return Err(DatasetError::Invalid("no pairs to batch".into()));
    }
    if batch_size == 0 {
        return Err(DatasetError::Invalid("batch size must be positive".into()));
    }
    if !(segment_seconds.is_finite() && segment_seconds > 0.0) {
        return Err(DatasetError::Invalid(format!(
            "segment length {segment_seconds}s must be positive"
        )));
    }
    let rate = pairs[0].noisy.sample_rate_hz;
    if let Some(odd) = pairs.iter().find(|p| {
        p.noisy.sample_rate_hz != rate
            || p.clean.sample_rate_hz != rate
            || p.noisy.len() != p.clean.len()
    }) {
        return Err(DatasetError::Invalid(format!(
            "pair {} disagrees with the corpus on sample rate or length",
            odd.entry_index
        )));
    }
    let segment = (segment_seconds * rate as f64).round() as usize;
    if segment == 0 {
        return Err(DatasetError::Invalid("segment rounds to zero samples".into()));
    }
    if let Some(short) = pairs.iter().find(|p| p.noisy.len() < segment) {
        return Err(DatasetError::Invalid(format!(
            "segment of {segment} samples exceeds pair {} length {}",
            short.entry_index,
            short.noisy.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut batch = EpochBatch {
            pairs: Vec::with_capacity(chunk.len()),
            pair_indices: chunk.to_vec(),
            crop_offsets: Vec::with_capacity(chunk.len()),
        };
        for &idx in chunk {
            let pair = &pairs[idx];
            let offset = rng.gen_range(0..=pair.noisy.len() - segment);
            batch.crop_offsets.push(offset);
            let crop = |wave: &WaveBuffer| -> Result<RISpectrogram> {
                let samples = wave.samples[offset..offset + segment].to_vec();
                Ok(stft(&WaveBuffer::new(samples, rate)?, &stft_config)?)
            };
            batch.pairs.push((crop(&pair.noisy)?, crop(&pair.clean)?));
        }
        batches.push(batch);
    }
    Ok(batches)
}
