//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`; the harness result line
//! doubles as the verdict otherwise). Tolerances are pinned here and nowhere
//! else. Heavy criteria stay within their stated wall-clock budgets on a
//! single laptop core.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rage::dataset::{
    self, build_manifest, materialize, pair_paths, LoadedPair, ManifestEntry, Split, SplitRatios,
};
use rage::dsp::{self, read_wav, stft, write_wav, RISpectrogram, StftConfig, WaveBuffer};
use rage::metrics::{self, evaluate, Enhancer};
use rage::model::{spectrogram_to_input, HeadInit, ModelConfig, Predictor};
use rage::tensor::fdcheck;
use rage::trainer::{
    fit, load_checkpoint, restore, save_checkpoint, Adam, LossKind, ResumePoint, StopReason,
    TrainConfig,
};

const RATE: u32 = 8000;

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("[{name}] {}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn wave(samples: Vec<f64>) -> WaveBuffer {
    WaveBuffer::new(samples, RATE).expect("finite samples")
}

/// Harmonic stack with `n_harmonics` partials over `f0`, a crude stand-in
/// for voiced speech.
fn harmonic(f0: f64, n_harmonics: usize, amp: f64, samples: usize) -> WaveBuffer {
    let mut values = vec![0.0; samples];
    for h in 1..=n_harmonics {
        let w = 2.0 * std::f64::consts::PI * f0 * h as f64 / RATE as f64;
        let a = amp / h as f64;
        for (i, v) in values.iter_mut().enumerate() {
            *v += a * (w * i as f64).sin();
        }
    }
    wave(values)
}

fn white(rng: &mut ChaCha8Rng, amp: f64, samples: usize) -> WaveBuffer {
    wave((0..samples).map(|_| rng.gen_range(-amp..amp)).collect())
}

/// 50 Hz mains buzz with overtones.
fn hum(amp: f64, samples: usize) -> WaveBuffer {
    let mut values = vec![0.0; samples];
    for (h, scale) in [(1, 1.0), (2, 0.6), (3, 0.35)] {
        let w = 2.0 * std::f64::consts::PI * 50.0 * h as f64 / RATE as f64;
        for (i, v) in values.iter_mut().enumerate() {
            *v += amp * scale * (w * i as f64).sin();
        }
    }
    wave(values)
}

fn rms(samples: &[f64]) -> f64 {
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

fn enhance_wave<F: rage::tensor::Real>(
    model: &Predictor<F>,
    noisy: &WaveBuffer,
) -> (WaveBuffer, RISpectrogram) {
    let spec = stft(noisy, &model.cfg.stft).expect("stft");
    let enhanced = model.enhance(&spec).expect("enhance");
    (dsp::istft(&enhanced, noisy.len()).expect("istft"), enhanced)
}

#[test]
fn c1_gradient_suite_matches_finite_differences() {
    let started = Instant::now();
    let reports = fdcheck::gradient_suite(20260815, 10).expect("gradient suite runs");
    let elapsed = started.elapsed().as_secs_f64();

    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("suite covers at least one op");
    let ok = reports.iter().all(|r| r.max_rel_err <= 1e-4 && r.instances >= 10) && elapsed <= 60.0;
    verdict(
        "c1 gradient suite",
        ok,
        &format!(
            "{} ops x10 instances, worst {} at {:.2e} (tol 1e-4), {:.1} s (budget 60 s)",
            reports.len(),
            worst.op,
            worst.max_rel_err,
            elapsed
        ),
    );
    assert!(ok, "worst op {} rel err {:.3e}, elapsed {elapsed:.1} s", worst.op, worst.max_rel_err);
}

#[test]
fn c2_stft_istft_round_trip_is_near_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = StftConfig::new(512, 128).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let seconds = rng.gen_range(1.0..3.0);
        let len = (seconds * 16000.0) as usize;
        let x = WaveBuffer::new((0..len).map(|_| rng.gen_range(-0.8..0.8)).collect(), 16000)
            .unwrap();
        let y = dsp::istft(&stft(&x, &config).unwrap(), x.len()).unwrap();
        let err: f64 = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b) * (a - b)).sum();
        let energy: f64 = x.samples.iter().map(|a| a * a).sum();
        worst = worst.max((err / energy).sqrt());
    }
    let ok = worst <= 1e-9;
    verdict(
        "c2 stft round trip",
        ok,
        &format!("20 random 1-3 s signals at 512/128, worst rel L2 {worst:.2e} (tol 1e-9)"),
    );
    assert!(ok, "worst relative L2 error {worst:.3e}");
}

#[test]
fn c3_materialized_mixtures_hit_requested_snr() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir_all(src.join("clean")).unwrap();
    std::fs::create_dir_all(src.join("noise")).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut clean_paths = Vec::new();
    for i in 0..10 {
        // The last file is nearly full-scale so that low-SNR mixtures clip
        // and exercise the recorded peak rescale.
        let amp = if i == 9 { 0.55 } else { rng.gen_range(0.25..0.4) };
        let f0 = rng.gen_range(150.0..400.0);
        let path = src.join("clean").join(format!("utt{i:02}.wav"));
        write_wav(&path, &harmonic(f0, 3, amp, RATE as usize)).unwrap();
        clean_paths.push(path);
    }
    let noise_paths = vec![
        src.join("noise").join("white.wav"),
        src.join("noise").join("hum.wav"),
    ];
    write_wav(&noise_paths[0], &white(&mut rng, 0.3, RATE as usize * 2)).unwrap();
    write_wav(&noise_paths[1], &hum(0.3, RATE as usize * 2)).unwrap();

    let grid = [-3.0, 0.0, 3.0, 6.0, 12.0];
    let plan =
        build_manifest(&clean_paths, &noise_paths, &grid, None, SplitRatios::ALL_TRAIN, 99)
            .unwrap();
    assert!(plan.warnings.is_empty(), "unexpected warnings: {:?}", plan.warnings);

    let root = dir.path().join("corpus");
    let mut max_dev = 0.0f64;
    let mut rescaled = 0usize;
    let mut covered: Vec<f64> = Vec::new();
    for entry in &plan.entries {
        let done = materialize(entry, &root).unwrap();
        if done.entry.peak_rescale != 1.0 {
            rescaled += 1;
        }
        let (noisy_path, clean_path) = pair_paths(&root, &done.entry);
        let noisy = read_wav(&noisy_path).unwrap();
        let clean = read_wav(&clean_path).unwrap();
        let noise: Vec<f64> =
            noisy.samples.iter().zip(&clean.samples).map(|(n, c)| n - c).collect();
        let measured = 20.0 * (rms(&clean.samples) / rms(&noise)).log10();
        max_dev = max_dev.max((measured - entry.snr_db).abs());
        if !covered.contains(&entry.snr_db) {
            covered.push(entry.snr_db);
        }
    }
    let ok = max_dev <= 0.01 && rescaled >= 1 && covered.len() == grid.len();
    verdict(
        "c3 snr exactness",
        ok,
        &format!(
            "{} mixtures over {:?} dB read back from disk, worst |dev| {:.4} dB (tol 0.01), {} peak-rescaled",
            plan.entries.len(),
            grid,
            max_dev,
            rescaled
        ),
    );
    assert!(
        ok,
        "max deviation {max_dev:.4} dB, {rescaled} rescaled entries, {} grid points covered",
        covered.len()
    );
}

#[test]
fn c4_forward_preserves_shape_and_attention_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy = white(&mut rng, 0.5, 2400);

    // (channels, depth, gates, reverse attention)
    let mut configs = Vec::new();
    for &c in &[16usize, 32] {
        for d in 1..=4usize {
            configs.push((c, d, true, true));
        }
    }
    configs.push((16, 2, false, false));
    configs.push((16, 3, true, false));

    let mut worst_branch_dev = 0.0f64;
    let mut alpha_lo = 1.0f64;
    let mut alpha_hi = 0.0f64;
    let mut checked_alphas = 0usize;
    for &(channels, depth, ag, ra) in &configs {
        let cfg = ModelConfig {
            base_channels: channels,
            depth,
            use_attention_gates: ag,
            use_reverse_attention: ra,
            stft: StftConfig::new(512, 128).unwrap(),
        };
        let model = Predictor::<f64>::new(cfg.clone(), 1000 + depth as u64, HeadInit::Random)
            .unwrap();
        let spec = stft(&noisy, &cfg.stft).unwrap();
        let x = spectrogram_to_input::<f64>(&spec, depth).unwrap();
        let fwd = model.forward(&x).unwrap();
        assert_eq!(
            fwd.out.shape(),
            x.shape(),
            "C={channels} D={depth} ag={ag} ra={ra}: output shape differs from padded input"
        );

        if ag {
            assert!(!fwd.alphas.is_empty(), "gated model produced no attention coefficients");
            for alpha in &fwd.alphas {
                for &a in alpha.data() {
                    alpha_lo = alpha_lo.min(a);
                    alpha_hi = alpha_hi.max(a);
                    checked_alphas += 1;
                    assert!(
                        a > 0.0 && a < 1.0,
                        "C={channels} D={depth}: attention coefficient {a} outside (0,1)"
                    );
                }
            }
        }
        if ra {
            assert_eq!(fwd.branches.len(), 3, "reverse attention must run three decoders");
            let summed = fwd.branches[0]
                .add(&fwd.branches[1])
                .unwrap()
                .add(&fwd.branches[2])
                .unwrap();
            let dev = summed
                .data()
                .iter()
                .zip(fwd.out.data())
                .map(|(s, o)| (s - o).abs())
                .fold(0.0f64, f64::max);
            worst_branch_dev = worst_branch_dev.max(dev);
            assert!(
                dev <= 1e-10,
                "C={channels} D={depth}: branch sum deviates from output by {dev:.3e}"
            );
        }
    }
    let ok = worst_branch_dev <= 1e-10 && alpha_lo > 0.0 && alpha_hi < 1.0;
    verdict(
        "c4 shape and attention contracts",
        ok,
        &format!(
            "{} configs; {} coefficients in [{:.3e}, 1-{:.3e}]; worst branch-sum dev {:.1e} (tol 1e-10)",
            configs.len(),
            checked_alphas,
            alpha_lo,
            1.0 - alpha_hi,
            worst_branch_dev
        ),
    );
    assert!(ok);
}

#[test]
fn c5_reverse_attention_parameter_budget() {
    let base_cfg = ModelConfig {
        base_channels: 16,
        depth: 4,
        use_attention_gates: true,
        use_reverse_attention: false,
        stft: StftConfig::new(512, 128).unwrap(),
    };
    let ra_cfg = ModelConfig { use_reverse_attention: true, ..base_cfg.clone() };

    let base_closed = rage::model::param_count(&base_cfg);
    let ra_closed = rage::model::param_count(&ra_cfg);
    let base_live = Predictor::<f32>::new(base_cfg, 7, HeadInit::Zero)
        .unwrap()
        .live_param_count();
    let ra_live = Predictor::<f32>::new(ra_cfg, 7, HeadInit::Zero).unwrap().live_param_count();

    let ratio = ra_closed as f64 / base_closed as f64;
    let ok = (1.6..=2.4).contains(&ratio) && base_closed == base_live && ra_closed == ra_live;
    verdict(
        "c5 parameter budget",
        ok,
        &format!(
            "C=16 D=4: gated {base_closed} params, reverse attention {ra_closed}; ratio {ratio:.3} within [1.6, 2.4]; closed form equals live sum"
        ),
    );
    assert!(
        ok,
        "ratio {ratio:.3}, closed/live base {base_closed}/{base_live}, ra {ra_closed}/{ra_live}"
    );
}

#[test]
fn c6_single_pair_overfit_recovers_the_clean_signal() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let clean = harmonic(210.0, 3, 0.3, RATE as usize * 2);
    let noise = white(&mut rng, 0.25, RATE as usize * 2);
    let mix = dsp::mix_at_snr(&clean, &noise, 3.0, 123).unwrap();
    let clean_ref = if mix.peak_rescale != 1.0 {
        wave(clean.samples.iter().map(|s| s / mix.peak_rescale).collect())
    } else {
        clean
    };
    let pair = LoadedPair { noisy: mix.noisy.clone(), clean: clean_ref.clone(), entry_index: 0 };

    let model_cfg = ModelConfig {
        base_channels: 16,
        depth: 4,
        use_attention_gates: true,
        use_reverse_attention: false,
        stft: StftConfig::new(512, 128).unwrap(),
    };
    let mut model = Predictor::<f32>::new(model_cfg, 6, HeadInit::Zero).unwrap();
    let mut adam = Adam::new(1e-3);
    let chunk = TrainConfig {
        max_epochs: 25,
        patience: 24,
        learning_rate: 1e-3,
        batch_size: 1,
        segment_seconds: 2.0,
        seed: 6,
        loss_kind: LossKind::RiMsePlusMag,
    };

    let noisy_si_sdr = metrics::si_sdr(&mix.noisy, &clean_ref).unwrap();
    let mut epoch1_loss = f64::NAN;
    let mut epochs_run = 0usize;
    let mut latest_loss = f64::NAN;
    let mut gain = f64::NEG_INFINITY;
    // The budget allows 200 epochs; stop as soon as both targets are met.
    for _ in 0..8 {
        let out = fit(&mut model, &mut adam, &[pair.clone()], &[pair.clone()], &chunk, None)
            .unwrap();
        if epoch1_loss.is_nan() {
            epoch1_loss = out.report.epochs[0].train_loss;
        }
        epochs_run += out.report.epochs.len();
        latest_loss = out.report.epochs.last().unwrap().train_loss;
        let (enhanced, _) = enhance_wave(&model, &mix.noisy);
        gain = metrics::si_sdr(&enhanced, &clean_ref).unwrap() - noisy_si_sdr;
        if latest_loss < 0.1 * epoch1_loss && gain >= 5.0 {
            break;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let ok = latest_loss < 0.1 * epoch1_loss && gain >= 5.0 && epochs_run <= 200 && elapsed <= 600.0;
    verdict(
        "c6 single-pair overfit",
        ok,
        &format!(
            "loss {epoch1_loss:.3} -> {latest_loss:.4} ({:.1}% of epoch 1) after {epochs_run} epochs; si_sdr {noisy_si_sdr:.2} dB + {gain:.2} dB gain (need +5); {elapsed:.0} s (budget 600 s)",
            100.0 * latest_loss / epoch1_loss
        ),
    );
    assert!(
        ok,
        "loss ratio {:.3}, gain {gain:.2} dB, {epochs_run} epochs, {elapsed:.0} s",
        latest_loss / epoch1_loss
    );
}

#[test]
fn c7_held_out_enhancement_beats_passthrough_and_patience_fires() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir_all(src.join("clean")).unwrap();
    std::fs::create_dir_all(src.join("noise")).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut clean_paths = Vec::new();
    for i in 0..40 {
        let f0 = rng.gen_range(150.0..400.0);
        let n_harmonics = rng.gen_range(2..=4);
        let amp = rng.gen_range(0.25..0.4);
        let path = src.join("clean").join(format!("utt{i:02}.wav"));
        write_wav(&path, &harmonic(f0, n_harmonics, amp, RATE as usize)).unwrap();
        clean_paths.push(path);
    }
    let noise_paths = vec![
        src.join("noise").join("white.wav"),
        src.join("noise").join("hum.wav"),
    ];
    write_wav(&noise_paths[0], &white(&mut rng, 0.3, RATE as usize * 2)).unwrap();
    write_wav(&noise_paths[1], &hum(0.3, RATE as usize * 2)).unwrap();

    let grid = [-3.0, 0.0, 3.0, 6.0, 12.0];
    let ratios = SplitRatios { train: 0.7, val: 0.15, test: 0.15 };
    let plan = build_manifest(&clean_paths, &noise_paths, &grid, None, ratios, 77).unwrap();
    let root = dir.path().join("corpus");
    let entries: Vec<ManifestEntry> = plan
        .entries
        .iter()
        .map(|e| materialize(e, &root).unwrap().entry)
        .collect();

    let train_pairs = dataset::load_split(&root, &entries, Split::Train).unwrap();
    let val_pairs = dataset::load_split(&root, &entries, Split::Val).unwrap();
    assert_eq!(train_pairs.len() + val_pairs.len(), 34);

    let model_cfg = ModelConfig {
        base_channels: 8,
        depth: 3,
        use_attention_gates: true,
        use_reverse_attention: false,
        stft: StftConfig::new(256, 64).unwrap(),
    };
    let mut model = Predictor::<f32>::new(model_cfg.clone(), 7, HeadInit::Zero).unwrap();
    let mut adam = Adam::new(1e-3);
    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 29,
        learning_rate: 1e-3,
        batch_size: 4,
        segment_seconds: 1.0,
        seed: 7,
        loss_kind: LossKind::RiMsePlusMag,
    };
    let out = fit(&mut model, &mut adam, &train_pairs, &val_pairs, &cfg, None).unwrap();

    let report = evaluate::<f32>(
        &root,
        &entries,
        &Enhancer::Model(&model),
        &model_cfg.stft,
    )
    .unwrap();
    let passthrough = report.overall_noisy.si_sdr_db;
    let enhanced = report.overall_enhanced.si_sdr_db;

    // Frozen optimizer: a learning rate far below f32 resolution leaves the
    // validation loss bit-identical each epoch, a guaranteed plateau.
    let plateau_cfg = TrainConfig {
        max_epochs: 30,
        patience: 10,
        learning_rate: 1e-300,
        batch_size: 4,
        segment_seconds: 1.0,
        seed: 7,
        loss_kind: LossKind::RiMsePlusMag,
    };
    let mut frozen = Predictor::<f32>::new(model_cfg, 8, HeadInit::Random).unwrap();
    let mut frozen_adam = Adam::new(1e-300);
    let plateau =
        fit(&mut frozen, &mut frozen_adam, &train_pairs, &val_pairs, &plateau_cfg, None).unwrap();
    let patience_fired = plateau.report.stop_reason == StopReason::Patience
        && plateau.report.epochs.len() == 11;

    let elapsed = started.elapsed().as_secs_f64();
    let ok = enhanced >= passthrough && patience_fired && elapsed <= 1800.0;
    verdict(
        "c7 held-out trend and patience",
        ok,
        &format!(
            "{} test files: mean si_sdr passthrough {passthrough:.2} dB vs enhanced {enhanced:.2} dB after {} epochs; plateau stopped by patience(10) at epoch {}; {elapsed:.0} s (budget 1800 s)",
            report.files.len(),
            out.report.epochs.len(),
            plateau.report.epochs.len()
        ),
    );
    assert!(
        ok,
        "passthrough {passthrough:.2} dB, enhanced {enhanced:.2} dB, plateau reason {:?} after {} epochs, {elapsed:.0} s",
        plateau.report.stop_reason,
        plateau.report.epochs.len()
    );
}

#[test]
fn c8_checkpoints_round_trip_and_resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs = Vec::new();
    for i in 0..2 {
        let clean = harmonic(200.0 + 60.0 * i as f64, 2, 0.3, RATE as usize / 2);
        let noise = white(&mut rng, 0.2, RATE as usize / 2);
        let mix = dsp::mix_at_snr(&clean, &noise, 3.0, 50 + i).unwrap();
        pairs.push(LoadedPair { noisy: mix.noisy, clean, entry_index: i as usize });
    }
    let model_cfg = ModelConfig {
        base_channels: 4,
        depth: 1,
        use_attention_gates: true,
        use_reverse_attention: false,
        stft: StftConfig::new(128, 32).unwrap(),
    };
    let full = TrainConfig {
        max_epochs: 4,
        patience: 3,
        learning_rate: 1e-3,
        batch_size: 1,
        segment_seconds: 0.25,
        seed: 8,
        loss_kind: LossKind::RiMsePlusMag,
    };

    // Straight run: epochs 1..=4 in one call.
    let mut straight = Predictor::<f32>::new(model_cfg.clone(), 9, HeadInit::Zero).unwrap();
    let mut straight_adam = Adam::new(full.learning_rate);
    let straight_out =
        fit(&mut straight, &mut straight_adam, &pairs, &pairs, &full, None).unwrap();

    // Interrupted run: epochs 1..=2, checkpoint to disk, restore, resume.
    let mut resumed = Predictor::<f32>::new(model_cfg, 9, HeadInit::Zero).unwrap();
    let mut resumed_adam = Adam::new(full.learning_rate);
    let half = TrainConfig { max_epochs: 2, patience: 1, ..full };
    let half_out = fit(&mut resumed, &mut resumed_adam, &pairs, &pairs, &half, None).unwrap();

    let ckpt_path = dir.path().join("half.rage");
    save_checkpoint(&ckpt_path, &half_out.last).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let round_trip_equal = loaded == half_out.last;
    let copy_path = dir.path().join("half-copy.rage");
    save_checkpoint(&copy_path, &loaded).unwrap();
    let bytes_equal =
        std::fs::read(&ckpt_path).unwrap() == std::fs::read(&copy_path).unwrap();

    let (mut resumed_model, mut resumed_opt) = restore::<f32>(&loaded).unwrap();
    let resume = ResumePoint { next_epoch: loaded.epoch + 1, stopper: loaded.stopper };
    let tail_out =
        fit(&mut resumed_model, &mut resumed_opt, &pairs, &pairs, &full, Some(resume)).unwrap();

    let straight_tail: Vec<(usize, u64, u64)> = straight_out
        .report
        .epochs
        .iter()
        .skip(2)
        .map(|e| (e.epoch, e.train_loss.to_bits(), e.val_loss.to_bits()))
        .collect();
    let resumed_tail: Vec<(usize, u64, u64)> = tail_out
        .report
        .epochs
        .iter()
        .map(|e| (e.epoch, e.train_loss.to_bits(), e.val_loss.to_bits()))
        .collect();
    let curves_equal = straight_tail == resumed_tail && !straight_tail.is_empty();
    let finals_equal = straight_out.last == tail_out.last;

    let ok = round_trip_equal && bytes_equal && curves_equal && finals_equal;
    verdict(
        "c8 persistence",
        ok,
        &format!(
            "save->load->save byte-identical: {bytes_equal}; resumed epochs {:?} match straight run bit for bit: {curves_equal}; final checkpoints identical: {finals_equal}",
            resumed_tail.iter().map(|(e, _, _)| *e).collect::<Vec<_>>()
        ),
    );
    assert!(
        ok,
        "round_trip={round_trip_equal} bytes={bytes_equal} curves={curves_equal} finals={finals_equal}"
    );
}
