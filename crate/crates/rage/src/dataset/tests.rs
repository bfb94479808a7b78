use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use super::*;

const SNR_GRID: [f64; 5] = [-3.0, 0.0, 3.0, 6.0, 12.0];

fn fake_paths(prefix: &str, n: usize) -> Vec<PathBuf> {
    (0..n).map(|i| PathBuf::from(format!("/data/{prefix}_{i:05}.wav"))).collect()
}

fn plan(
    n_clean: usize,
    n_noise: usize,
    ratios: SplitRatios,
    seed: u64,
) -> ManifestPlan {
    build_manifest(
        &fake_paths("clean", n_clean),
        &fake_paths("noise", n_noise),
        &SNR_GRID,
        None,
        ratios,
        seed,
    )
    .unwrap()
}

// ── manifest planning ────────────────────────────────────────────

#[test]
fn ten_files_two_noises_cover_every_snr_once_per_noise() {
    let plan = plan(10, 2, SplitRatios::ALL_TRAIN, 7);
    assert!(plan.warnings.is_empty());
    assert_eq!(plan.entries.len(), 10);

    let mut per_noise: HashMap<&str, Vec<f64>> = HashMap::new();
    for e in &plan.entries {
        assert_eq!(e.split, Split::Train);
        assert_eq!(e.peak_rescale, 1.0);
        per_noise.entry(e.noise_category.as_str()).or_default().push(e.snr_db);
    }
    assert_eq!(per_noise.len(), 2);
    for (_, mut snrs) in per_noise {
        assert_eq!(snrs.len(), 5);
        snrs.sort_by(f64::total_cmp);
        assert_eq!(snrs, SNR_GRID.to_vec());
    }
}

#[test]
fn same_seed_reproduces_the_manifest_byte_for_byte() {
    let a = plan(23, 3, SplitRatios { train: 0.6, val: 0.2, test: 0.2 }, 99);
    let b = plan(23, 3, SplitRatios { train: 0.6, val: 0.2, test: 0.2 }, 99);
    let ser = |p: &ManifestPlan| {
        p.entries.iter().map(|e| serde_json::to_string(e).unwrap()).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(ser(&a), ser(&b));
    let c = plan(23, 3, SplitRatios { train: 0.6, val: 0.2, test: 0.2 }, 100);
    assert_ne!(ser(&a), ser(&c), "different seed must reorder the plan");
}

#[test]
fn paper_scale_partition_balances_within_one() {
    let plan = plan(19_992, 27, SplitRatios::ALL_TRAIN, 1);
    let mut per_noise: HashMap<&str, usize> = HashMap::new();
    let mut per_snr: HashMap<(&str, i64), usize> = HashMap::new();
    for e in &plan.entries {
        *per_noise.entry(e.noise_category.as_str()).or_default() += 1;
        *per_snr.entry((e.noise_category.as_str(), e.snr_db as i64)).or_default() += 1;
    }
    assert_eq!(per_noise.len(), 27);
    assert_eq!(per_noise.values().sum::<usize>(), 19_992);
    // 19992 = 27 * 740 + 12: twelve categories get 741
    assert!(per_noise.values().all(|&c| c == 740 || c == 741));
    assert_eq!(per_noise.values().filter(|&&c| c == 741).count(), 12);
    for (_, counts) in per_snr.iter() {
        assert!((148..=149).contains(counts), "per-SNR counts within a noise stay ±1");
    }
}

#[test]
fn splits_are_contiguous_disjoint_and_sized_by_ratio() {
    let plan = plan(40, 4, SplitRatios { train: 0.7, val: 0.15, test: 0.15 }, 5);
    let mut seen: HashMap<&Path, Split> = HashMap::new();
    let mut counts: HashMap<Split, usize> = HashMap::new();
    for e in &plan.entries {
        *counts.entry(e.split).or_default() += 1;
        if let Some(prev) = seen.insert(e.clean_path.as_path(), e.split) {
            assert_eq!(prev, e.split, "clean file in two splits");
        }
    }
    assert_eq!(counts[&Split::Train], 28);
    assert_eq!(counts[&Split::Val], 6);
    assert_eq!(counts[&Split::Test], 6);
}

#[test]
fn identity_quadruple_is_unique() {
    let plan = plan(60, 7, SplitRatios { train: 0.8, val: 0.1, test: 0.1 }, 11);
    let mut keys = HashSet::new();
    for e in &plan.entries {
        let key = (e.clean_path.clone(), e.noise_path.clone(), e.snr_db.to_bits(), e.seed);
        assert!(keys.insert(key), "duplicate mixture identity");
    }
}

#[test]
fn oversized_per_noise_request_truncates_with_warning() {
    let out = build_manifest(
        &fake_paths("clean", 8),
        &fake_paths("noise", 2),
        &SNR_GRID,
        Some(10),
        SplitRatios::ALL_TRAIN,
        3,
    )
    .unwrap();
    assert_eq!(out.entries.len(), 8);
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("truncating"), "{}", out.warnings[0]);

    let capped = build_manifest(
        &fake_paths("clean", 8),
        &fake_paths("noise", 2),
        &SNR_GRID,
        Some(2),
        SplitRatios::ALL_TRAIN,
        3,
    )
    .unwrap();
    assert_eq!(capped.entries.len(), 4, "2 per noise x 2 noises");
    assert!(capped.warnings.is_empty());
}

#[test]
fn degenerate_requests_are_rejected() {
    let clean = fake_paths("clean", 4);
    let noise = fake_paths("noise", 2);
    assert!(build_manifest(&[], &noise, &SNR_GRID, None, SplitRatios::ALL_TRAIN, 0).is_err());
    assert!(build_manifest(&clean, &[], &SNR_GRID, None, SplitRatios::ALL_TRAIN, 0).is_err());
    assert!(build_manifest(&clean, &noise, &[], None, SplitRatios::ALL_TRAIN, 0).is_err());
    assert!(build_manifest(&clean, &noise, &[f64::NAN], None, SplitRatios::ALL_TRAIN, 0).is_err());
    assert!(build_manifest(&clean, &noise, &SNR_GRID, Some(0), SplitRatios::ALL_TRAIN, 0).is_err());
    let bad = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
    assert!(build_manifest(&clean, &noise, &SNR_GRID, None, bad, 0).is_err());
}

#[test]
fn manifest_round_trips_through_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    let plan = plan(12, 3, SplitRatios { train: 0.5, val: 0.25, test: 0.25 }, 21);
    write_manifest(&path, &plan.entries).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().next().unwrap().contains("\"snr_db\""));

    let back = read_manifest(&path).unwrap();
    assert_eq!(back, plan.entries);
}

// ── materialization ──────────────────────────────────────────────

fn sine(n: usize, amp: f64, freq: f64, rate: u32) -> WaveBuffer {
    let w = 2.0 * PI * freq / rate as f64;
    WaveBuffer::new((0..n).map(|i| amp * (w * i as f64).sin()).collect(), rate).unwrap()
}

fn noise_burst(n: usize, amp: f64, seed: u64, rate: u32) -> WaveBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WaveBuffer::new((0..n).map(|_| amp * (2.0 * rng.gen::<f64>() - 1.0)).collect(), rate).unwrap()
}

struct Corpus {
    dir: tempfile::TempDir,
    entry: ManifestEntry,
}

fn write_corpus(clean: &WaveBuffer, noise: &WaveBuffer, snr_db: f64) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let clean_path = dir.path().join("speech.wav");
    let noise_path = dir.path().join("babble.wav");
    write_wav(&clean_path, clean).unwrap();
    write_wav(&noise_path, noise).unwrap();
    let entry = ManifestEntry {
        clean_path,
        noise_path,
        noise_category: "babble".into(),
        snr_db,
        seed: 41,
        split: Split::Train,
        peak_rescale: 1.0,
    };
    Corpus { dir, entry }
}

fn measured_snr_db(noisy: &WaveBuffer, clean_ref: &WaveBuffer) -> f64 {
    let residual: Vec<f64> = noisy
        .samples
        .iter()
        .zip(&clean_ref.samples)
        .map(|(n, c)| n - c)
        .collect();
    let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    20.0 * (clean_ref.rms() / rms(&residual)).log10()
}

#[test]
fn zero_db_equal_rms_sources_record_unit_gain() {
    let clean = sine(8000, 0.2, 440.0, 16000);
    let noise = sine(8000, 0.2, 440.0, 16000);
    let c = write_corpus(&clean, &noise, 0.0);
    let out = materialize(&c.entry, c.dir.path()).unwrap();
    assert!((out.gain - 1.0).abs() < 1e-12);
    assert_eq!(out.entry.peak_rescale, 1.0);
    assert!(out.noisy_path.ends_with("train/noisy/speech__babble__snr0.wav"));
    assert!(out.clean_ref_path.ends_with("train/clean/speech__babble__snr0.wav"));
}

#[test]
fn rematerialization_is_byte_identical() {
    let clean = sine(12000, 0.3, 330.0, 16000);
    let noise = noise_burst(50000, 0.4, 5, 16000);
    let c = write_corpus(&clean, &noise, 3.0);
    let first = materialize(&c.entry, c.dir.path()).unwrap();
    let noisy_a = fs::read(&first.noisy_path).unwrap();
    let clean_a = fs::read(&first.clean_ref_path).unwrap();
    let second = materialize(&c.entry, c.dir.path()).unwrap();
    assert_eq!(noisy_a, fs::read(&second.noisy_path).unwrap());
    assert_eq!(clean_a, fs::read(&second.clean_ref_path).unwrap());
}

#[test]
fn persisted_pair_exhibits_the_planned_snr() {
    for snr in SNR_GRID {
        let clean = sine(16000, 0.25, 300.0, 16000);
        let noise = noise_burst(60000, 0.3, 17, 16000);
        let c = write_corpus(&clean, &noise, snr);
        let out = materialize(&c.entry, c.dir.path()).unwrap();
        let noisy = read_wav(&out.noisy_path).unwrap();
        let clean_ref = read_wav(&out.clean_ref_path).unwrap();
        let measured = measured_snr_db(&noisy, &clean_ref);
        assert!(
            (measured - snr).abs() < 0.01,
            "snr {snr}: measured {measured} after 16-bit quantization"
        );
    }
}

#[test]
fn clipping_mixture_scales_clean_reference_to_match() {
    // near-full-scale clean plus -3 dB noise forces |mix| > 1
    let clean = sine(16000, 0.95, 250.0, 16000);
    let noise = noise_burst(40000, 0.8, 29, 16000);
    let c = write_corpus(&clean, &noise, -3.0);
    let out = materialize(&c.entry, c.dir.path()).unwrap();
    assert!(out.entry.peak_rescale > 1.0, "expected clipping, got {}", out.entry.peak_rescale);

    let noisy = read_wav(&out.noisy_path).unwrap();
    let clean_ref = read_wav(&out.clean_ref_path).unwrap();
    assert!(noisy.samples.iter().all(|s| s.abs() <= 1.0));
    // rescale divides both signals, so the persisted SNR is unchanged
    let measured = measured_snr_db(&noisy, &clean_ref);
    assert!((measured + 3.0).abs() < 0.01, "measured {measured}");
    // and the clean reference is the original divided by peak_rescale
    let expected_rms = clean.rms() / out.entry.peak_rescale;
    assert!((clean_ref.rms() - expected_rms).abs() < 1e-4);
}

#[test]
fn materialize_names_the_failing_entry() {
    let dir = tempfile::tempdir().unwrap();
    let entry = ManifestEntry {
        clean_path: dir.path().join("missing.wav"),
        noise_path: dir.path().join("also_missing.wav"),
        noise_category: "gone".into(),
        snr_db: 0.0,
        seed: 1,
        split: Split::Test,
        peak_rescale: 1.0,
    };
    let err = materialize(&entry, dir.path()).unwrap_err().to_string();
    assert!(err.contains("missing__gone__snr0"), "{err}");
}

// ── batching ─────────────────────────────────────────────────────

fn loaded_pairs(n: usize, samples: usize, rate: u32) -> Vec<LoadedPair> {
    (0..n)
        .map(|i| LoadedPair {
            noisy: noise_burst(samples, 0.5, 100 + i as u64, rate),
            clean: sine(samples, 0.3, 200.0 + i as f64, rate),
            entry_index: i,
        })
        .collect()
}

#[test]
fn ten_pairs_batch_two_gives_five_batches() {
    let pairs = loaded_pairs(10, 40000, 16000);
    let cfg = StftConfig::default();
    let batches = epoch_batches(&pairs, 2, 2.0, cfg, 7).unwrap();
    assert_eq!(batches.len(), 5);
    for batch in &batches {
        assert_eq!(batch.pairs.len(), 2);
        for (noisy, clean) in &batch.pairs {
            // 2 s at 16 kHz -> 32000 samples -> 32000/128 + 1 frames
            assert_eq!(noisy.data.shape(), &[2, 257, 251]);
            assert_eq!(clean.data.shape(), &[2, 257, 251]);
        }
    }
    // every pair appears exactly once per epoch
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.pair_indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}

#[test]
fn trailing_partial_batch_is_kept() {
    let pairs = loaded_pairs(5, 40000, 16000);
    let batches = epoch_batches(&pairs, 2, 2.0, StftConfig::default(), 7).unwrap();
    assert_eq!(batches.len(), 3);
    assert_eq!(batches[2].pairs.len(), 1);
}

#[test]
fn same_seed_reproduces_order_and_crop_offsets() {
    let pairs = loaded_pairs(6, 48000, 16000);
    let cfg = StftConfig::default();
    let a = epoch_batches(&pairs, 2, 1.5, cfg, 7).unwrap();
    let b = epoch_batches(&pairs, 2, 1.5, cfg, 7).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.pair_indices, y.pair_indices);
        assert_eq!(x.crop_offsets, y.crop_offsets);
        for ((nx, cx), (ny, cy)) in x.pairs.iter().zip(&y.pairs) {
            assert_eq!(nx.data.data(), ny.data.data());
            assert_eq!(cx.data.data(), cy.data.data());
        }
    }
    let c = epoch_batches(&pairs, 2, 1.5, cfg, 8).unwrap();
    let order_a: Vec<_> = a.iter().flat_map(|b| b.pair_indices.clone()).collect();
    let order_c: Vec<_> = c.iter().flat_map(|b| b.pair_indices.clone()).collect();
    assert_ne!((order_a, &a[0].crop_offsets), (order_c, &c[0].crop_offsets));
}

#[test]
fn crops_are_cut_from_the_source_at_the_reported_offset() {
    let pairs = loaded_pairs(3, 40000, 16000);
    let cfg = StftConfig::default();
    let batches = epoch_batches(&pairs, 1, 1.0, cfg, 13).unwrap();
    let batch = &batches[0];
    let src = &pairs[batch.pair_indices[0]];
    let off = batch.crop_offsets[0];
    let manual = stft(
        &WaveBuffer::new(src.noisy.samples[off..off + 16000].to_vec(), 16000).unwrap(),
        &cfg,
    )
    .unwrap();
    assert_eq!(batch.pairs[0].0.data.data(), manual.data.data());
}

#[test]
fn overlong_segment_and_degenerate_requests_are_rejected() {
    let pairs = loaded_pairs(2, 8000, 16000);
    let cfg = StftConfig::default();
    assert!(epoch_batches(&pairs, 2, 2.0, cfg, 1).is_err(), "8000 samples < 2 s");
    assert!(epoch_batches(&pairs, 0, 0.25, cfg, 1).is_err());
    assert!(epoch_batches(&pairs, 2, 0.0, cfg, 1).is_err());
    assert!(epoch_batches(&[], 2, 0.25, cfg, 1).is_err());
}

#[test]
fn load_split_round_trips_materialized_audio_and_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let clean_dir = dir.path().join("clean_src");
    let noise_dir = dir.path().join("noise_src");
    fs::create_dir_all(&clean_dir).unwrap();
    fs::create_dir_all(&noise_dir).unwrap();
    for i in 0..4 {
        write_wav(&clean_dir.join(format!("c{i}.wav")), &sine(20000, 0.2, 300.0 + i as f64, 16000))
            .unwrap();
    }
    write_wav(&noise_dir.join("hum.wav"), &noise_burst(30000, 0.3, 3, 16000)).unwrap();

    let plan = build_manifest(
        &scan_wav_dir(&clean_dir).unwrap(),
        &scan_wav_dir(&noise_dir).unwrap(),
        &[0.0, 6.0],
        None,
        SplitRatios { train: 0.5, val: 0.0, test: 0.5 },
        9,
    )
    .unwrap();
    let out_root = dir.path().join("out");
    let entries: Vec<ManifestEntry> = plan
        .entries
        .iter()
        .map(|e| materialize(e, &out_root).unwrap().entry)
        .collect();

    let train = load_split(&out_root, &entries, Split::Train).unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(train[0].noisy.sample_rate_hz, 16000);
    assert_eq!(train[0].noisy.len(), train[0].clean.len());
    assert!(load_split(&out_root, &entries, Split::Val).is_err(), "empty split rejected");

    // deleting one file surfaces the entry id
    let victim = &entries[0];
    let (noisy_path, _) = super::pair_paths(&out_root, victim);
    fs::remove_file(noisy_path).unwrap();
    let err = load_split(&out_root, &entries, victim.split).unwrap_err().to_string();
    assert!(err.contains(&victim.id()), "{err}");
}

#[test]
fn scan_wav_dir_filters_and_sorts() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.wav", "a.wav", "notes.txt", "c.WAV"] {
        fs::write(dir.path().join(name), b"x").unwrap();
    }
    let files = scan_wav_dir(dir.path()).unwrap();
    let names: Vec<_> =
        files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["a.wav", "b.wav", "c.WAV"]);
    assert!(scan_wav_dir(&dir.path().join("nope")).is_err());
}
