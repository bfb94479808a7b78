//! One function per subcommand. Every command prints its fully resolved
//! configuration first, so logs are self-describing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;

use rage::dataset::{self, ManifestEntry, Split, SplitRatios};
use rage::dsp::{self, DspError, StftConfig, WaveBuffer};
use rage::metrics::{self, Enhancer};
use rage::model::{param_count, widths, HeadInit, ModelConfig, Predictor};
use rage::tensor::{fdcheck, Real};
use rage::trainer::{
    self, load_checkpoint, save_checkpoint, Adam, LossKind, ResumePoint, TrainConfig,
    TrainerError, TrainingReport,
};

use crate::{
    EnhanceArgs, EvalArgs, Global, InfoArgs, LossFlag, MixArgs, NumericFailure, Precision,
    SelfTestArgs, Toggle, TrainArgs,
};

/// Gradient self-test acceptance threshold on the relative error between
/// analytic and central-difference derivatives.
const GRAD_TOL: f64 = 1e-4;

fn print_config(title: &str, rows: &[(&str, String)]) {
    println!("{title}");
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (key, value) in rows {
        println!("  {key:<width$} = {value}");
    }
}

fn check_rate(path: &Path, wave: &WaveBuffer, want: Option<u32>) -> Result<()> {
    if let Some(hz) = want {
        if wave.sample_rate_hz != hz {
            return Err(DspError::Invalid(format!(
                "{}: sample rate {} Hz, expected {hz} Hz",
                path.display(),
                wave.sample_rate_hz
            ))
            .into());
        }
    }
    Ok(())
}

/// Directory the materialized pairs live under: next to the manifest.
fn manifest_root(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    }
}

/// Resolve the gate flags: reverse attention builds on the gated skips, so
/// it pulls them in when they were switched off.
fn resolve_gates(ag: Toggle, ra: Toggle) -> (bool, bool) {
    if ra.is_on() && !ag.is_on() {
        eprintln!("warning: --ra on requires attention gates; enabling --ag");
        return (true, true);
    }
    (ag.is_on(), ra.is_on())
}

// ── mix ──────────────────────────────────────────────────────────

pub fn mix(global: &Global, args: &MixArgs) -> Result<()> {
    let clean = dataset::scan_wav_dir(&args.clean_dir)?;
    let noise = dataset::scan_wav_dir(&args.noise_dir)?;
    let ratios = SplitRatios {
        train: args.train_frac,
        val: args.val_frac,
        test: args.test_frac,
    };
    let snrs = args
        .snrs
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    print_config(
        "mix",
        &[
            ("clean_dir", args.clean_dir.display().to_string()),
            ("noise_dir", args.noise_dir.display().to_string()),
            ("out", args.out.display().to_string()),
            ("clean_files", clean.len().to_string()),
            ("noise_files", noise.len().to_string()),
            ("snrs_db", snrs),
            (
                "per_noise",
                args.per_noise.map_or("all".into(), |n| n.to_string()),
            ),
            (
                "split",
                format!("{}/{}/{}", ratios.train, ratios.val, ratios.test),
            ),
            ("seed", global.seed.to_string()),
        ],
    );

    if global.sample_rate.is_some() {
        for path in clean.iter().chain(&noise) {
            check_rate(path, &dsp::read_wav(path)?, global.sample_rate)?;
        }
    }

    let plan = dataset::build_manifest(&clean, &noise, &args.snrs, args.per_noise, ratios, global.seed)?;
    for warning in &plan.warnings {
        eprintln!("warning: {warning}");
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let entries: Vec<ManifestEntry> = plan
        .entries
        .par_iter()
        .map(|entry| Ok(dataset::materialize(entry, &args.out)?.entry))
        .collect::<Result<_>>()?;

    let manifest_path = args.out.join("manifest.jsonl");
    dataset::write_manifest(&manifest_path, &entries)?;

    let count = |split: Split| entries.iter().filter(|e| e.split == split).count();
    println!(
        "materialized {} pairs (train {}, val {}, test {})",
        entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
    );
    println!("manifest -> {}", manifest_path.display());
    Ok(())
}

// ── train ────────────────────────────────────────────────────────

/// The resume checkpoint that `train --out X.rage` writes: `X.last.rage`.
fn last_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    match (out.file_stem(), out.extension()) {
        (Some(stem), Some(ext)) => out.with_file_name(format!(
            "{}.last.{}",
            stem.to_string_lossy(),
            ext.to_string_lossy()
        )),
        _ => out.with_file_name(format!("{name}.last")),
    }
}

pub fn train(global: &Global, args: &TrainArgs) -> Result<()> {
    let (ag, ra) = resolve_gates(args.ag, args.ra);
    let model_cfg = ModelConfig {
        base_channels: args.channels,
        depth: args.depth,
        use_attention_gates: ag,
        use_reverse_attention: ra,
        stft: StftConfig::new(args.n_fft, args.hop)?,
    };
    let train_cfg = TrainConfig {
        max_epochs: args.epochs,
        patience: args.patience,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        segment_seconds: args.segment_seconds,
        seed: global.seed,
        loss_kind: match args.loss {
            LossFlag::RiMse => LossKind::RiMse,
            LossFlag::RiMseMag => LossKind::RiMsePlusMag,
        },
    };
    train_cfg.validate()?;

    let root = manifest_root(&args.manifest);
    let entries = dataset::read_manifest(&args.manifest)?;
    let train_pairs = dataset::load_split(&root, &entries, Split::Train)?;
    let val_pairs = dataset::load_split(&root, &entries, Split::Val)?;
    if let Some(hz) = global.sample_rate {
        for pair in train_pairs.iter().chain(&val_pairs) {
            check_rate(&args.manifest, &pair.noisy, Some(hz))?;
        }
    }

    print_config(
        "train",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("train_pairs", train_pairs.len().to_string()),
            ("val_pairs", val_pairs.len().to_string()),
            ("channels", model_cfg.base_channels.to_string()),
            ("depth", model_cfg.depth.to_string()),
            ("attention_gates", if ag { "on" } else { "off" }.into()),
            ("reverse_attention", if ra { "on" } else { "off" }.into()),
            ("stft", format!("{}/{}", args.n_fft, args.hop)),
            ("epochs", train_cfg.max_epochs.to_string()),
            ("patience", train_cfg.patience.to_string()),
            ("learning_rate", train_cfg.learning_rate.to_string()),
            ("batch_size", train_cfg.batch_size.to_string()),
            ("segment_seconds", train_cfg.segment_seconds.to_string()),
            ("loss", args.loss.to_string()),
            ("precision", global.precision.to_string()),
            ("seed", global.seed.to_string()),
            ("out", args.out.display().to_string()),
            ("resume", args.resume.to_string()),
        ],
    );

    match global.precision {
        Precision::F32 => run_train::<f32>(args, model_cfg, train_cfg, &train_pairs, &val_pairs),
        Precision::F64 => run_train::<f64>(args, model_cfg, train_cfg, &train_pairs, &val_pairs),
    }
}

fn run_train<F: Real>(
    args: &TrainArgs,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs: &[dataset::LoadedPair],
    val_pairs: &[dataset::LoadedPair],
) -> Result<()> {
    let last = last_path(&args.out);
    let (mut model, mut adam, resume) = if args.resume {
        if !last.is_file() {
            return Err(TrainerError::Invalid(format!(
                "--resume: no checkpoint at {}",
                last.display()
            ))
            .into());
        }
        let ckpt = load_checkpoint(&last)?;
        if ckpt.model != model_cfg {
            return Err(TrainerError::Invalid(format!(
                "--resume: {} was trained as {:?}; the requested flags resolve to {:?}",
                last.display(),
                ckpt.model,
                model_cfg
            ))
            .into());
        }
        let (model, mut adam) = trainer::restore::<F>(&ckpt)?;
        adam.learning_rate = train_cfg.learning_rate;
        println!("resuming after epoch {} from {}", ckpt.epoch, last.display());
        let resume = ResumePoint {
            next_epoch: ckpt.epoch + 1,
            stopper: ckpt.stopper,
        };
        (model, adam, Some(resume))
    } else {
        let model = Predictor::new(model_cfg, train_cfg.seed, HeadInit::Zero)?;
        (model, Adam::new(train_cfg.learning_rate), None)
    };

    let out = trainer::fit(&mut model, &mut adam, train_pairs, val_pairs, &train_cfg, resume)?;

    println!("epoch  train_loss    val_loss");
    for e in &out.report.epochs {
        println!("{:>5}  {:>10.6}  {:>10.6}", e.epoch, e.train_loss, e.val_loss);
    }
    println!(
        "stopped after {} epochs ({}); best epoch {} at val loss {:.6}; {:.1} s",
        out.report.epochs.len(),
        out.report.stop_reason,
        out.report.best_epoch,
        out.report.best_val_loss,
        out.report.wall_seconds,
    );

    save_checkpoint(&args.out, &out.best)?;
    save_checkpoint(&last, &out.last)?;
    println!("best checkpoint -> {}", args.out.display());
    println!("last checkpoint -> {}", last.display());

    if let Some(report_path) = &args.report {
        write_report(report_path, &out.report)?;
        println!("report -> {}", report_path.display());
    }
    Ok(())
}

fn write_report(path: &Path, report: &TrainingReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).context("report serialization")?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

// ── enhance ──────────────────────────────────────────────────────

pub fn enhance(global: &Global, args: &EnhanceArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let wave = dsp::read_wav(&args.input)?;
    check_rate(&args.input, &wave, global.sample_rate)?;

    print_config(
        "enhance",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            (
                "model",
                format!(
                    "channels={} depth={} ag={} ra={} stft={}/{}",
                    ckpt.model.base_channels,
                    ckpt.model.depth,
                    if ckpt.model.use_attention_gates { "on" } else { "off" },
                    if ckpt.model.use_reverse_attention { "on" } else { "off" },
                    ckpt.model.stft.n_fft,
                    ckpt.model.stft.hop,
                ),
            ),
            ("in", args.input.display().to_string()),
            (
                "input",
                format!(
                    "{} samples at {} Hz ({:.2} s)",
                    wave.len(),
                    wave.sample_rate_hz,
                    wave.len() as f64 / wave.sample_rate_hz as f64
                ),
            ),
            ("out", args.out.display().to_string()),
            ("precision", global.precision.to_string()),
        ],
    );

    let enhanced = match global.precision {
        Precision::F32 => run_enhance::<f32>(&ckpt, &wave)?,
        Precision::F64 => run_enhance::<f64>(&ckpt, &wave)?,
    };
    dsp::write_wav(&args.out, &enhanced)?;
    println!("wrote {} ({} samples)", args.out.display(), enhanced.len());
    Ok(())
}

fn run_enhance<F: Real>(ckpt: &trainer::Checkpoint, wave: &WaveBuffer) -> Result<WaveBuffer> {
    let (model, _) = trainer::restore::<F>(ckpt)?;
    let spec = dsp::stft(wave, &model.cfg.stft)?;
    let out = model.enhance(&spec)?;
    Ok(dsp::istft(&out, wave.len())?)
}

// ── eval ─────────────────────────────────────────────────────────

pub fn eval(global: &Global, args: &EvalArgs) -> Result<()> {
    let root = manifest_root(&args.manifest);
    let entries = dataset::read_manifest(&args.manifest)?;

    let ckpt = args.ckpt.as_ref().map(|p| load_checkpoint(p)).transpose()?;
    let base_stft = ckpt
        .as_ref()
        .map(|c| c.model.stft)
        .unwrap_or_default();
    let metric_stft = StftConfig::new(
        args.n_fft.unwrap_or(base_stft.n_fft),
        args.hop.unwrap_or(base_stft.hop),
    )?;

    print_config(
        "eval",
        &[
            ("manifest", args.manifest.display().to_string()),
            (
                "estimate",
                match &args.ckpt {
                    Some(p) => p.display().to_string(),
                    None => "passthrough (noisy input)".into(),
                },
            ),
            (
                "metric_stft",
                format!("{}/{}", metric_stft.n_fft, metric_stft.hop),
            ),
            ("precision", global.precision.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );

    let report = match (&ckpt, global.precision) {
        (None, _) => metrics::evaluate::<f32>(&root, &entries, &Enhancer::Passthrough, &metric_stft)?,
        (Some(c), Precision::F32) => {
            let (model, _) = trainer::restore::<f32>(c)?;
            metrics::evaluate(&root, &entries, &Enhancer::Model(&model), &metric_stft)?
        }
        (Some(c), Precision::F64) => {
            let (model, _) = trainer::restore::<f64>(c)?;
            metrics::evaluate(&root, &entries, &Enhancer::Model(&model), &metric_stft)?
        }
    };

    fs::write(&args.out, report.to_json())
        .with_context(|| format!("writing {}", args.out.display()))?;
    print!("{}", report.render_table());
    println!("report -> {}", args.out.display());
    Ok(())
}

// ── info ─────────────────────────────────────────────────────────

pub fn info(args: &InfoArgs) -> Result<()> {
    let (ag, ra) = resolve_gates(args.ag, args.ra);
    let cfg = ModelConfig {
        base_channels: args.channels,
        depth: args.depth,
        use_attention_gates: ag,
        use_reverse_attention: ra,
        ..ModelConfig::default()
    };
    print_config(
        "info",
        &[
            ("channels", cfg.base_channels.to_string()),
            ("depth", cfg.depth.to_string()),
            ("attention_gates", if ag { "on" } else { "off" }.into()),
            ("reverse_attention", if ra { "on" } else { "off" }.into()),
        ],
    );

    let w = widths(&cfg);
    println!("topology");
    println!("  stem          2 -> {}", w[0]);
    for s in 1..=cfg.depth {
        println!("  enc {s}      {:>5} -> {}", w[s - 1], w[s]);
    }
    println!("  bottleneck {:>5}", w[cfg.depth]);
    for s in (1..=cfg.depth).rev() {
        println!("  dec {s}      {:>5} -> {} (+ 2-channel head)", w[s], w[s - 1]);
    }
    if ra {
        println!("  plus a second encoder tower and two more decoders");
    }

    let closed = param_count(&cfg);
    let model = Predictor::<f32>::new(cfg, 0, HeadInit::Zero)?;
    let live = model.live_param_count();
    println!("parameters");
    println!("  closed_form = {closed}");
    println!("  live_model  = {live}");
    if closed != live {
        return Err(NumericFailure(format!(
            "parameter count mismatch: closed form {closed}, live model {live}"
        ))
        .into());
    }
    if ra {
        let baseline = param_count(&ModelConfig {
            use_reverse_attention: false,
            ..cfg
        });
        println!("  gated_baseline = {baseline}");
        println!("  ra_ratio = {:.3}", closed as f64 / baseline as f64);
    }
    Ok(())
}

// ── self-test ────────────────────────────────────────────────────

pub fn self_test(global: &Global, args: &SelfTestArgs) -> Result<()> {
    print_config(
        "self-test",
        &[
            ("precision", "f64 (forced)".into()),
            ("instances_per_op", args.instances.to_string()),
            ("tolerance", format!("{GRAD_TOL:e}")),
            ("seed", global.seed.to_string()),
        ],
    );
    let reports = fdcheck::gradient_suite(global.seed, args.instances)?;
    let mut failed = 0usize;
    for r in &reports {
        let ok = r.max_rel_err <= GRAD_TOL;
        if !ok {
            failed += 1;
        }
        println!(
            "  {:<28} {:>4} instances  max rel err {:>10.3e}  {}",
            r.op,
            r.instances,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" },
        );
    }
    if failed > 0 {
        return Err(NumericFailure(format!(
            "gradient self-test: {failed} of {} operations exceeded {GRAD_TOL:e}",
            reports.len()
        ))
        .into());
    }
    println!("all {} operations within {GRAD_TOL:e}", reports.len());
    Ok(())
}
