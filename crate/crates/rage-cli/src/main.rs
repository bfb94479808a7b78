//! `rage`: mix corpora at exact SNRs, train the enhancement predictor,
//! enhance single files, and score test splits into grouped reports.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rage::dataset::DatasetError;
use rage::dsp::DspError;
use rage::metrics::MetricsError;
use rage::tensor::TensorError;
use rage::trainer::TrainerError;

#[derive(Parser)]
#[command(
    name = "rage",
    version,
    about = "Attention-gated U-Net speech enhancement toolkit"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Model arithmetic width (self-test always runs in f64).
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Reject input WAVs at any other sample rate.
    #[arg(long, global = true, value_name = "HZ")]
    sample_rate: Option<u32>,
    /// Worker thread cap; overrides RAGE_THREADS (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn is_on(self) -> bool {
        self == Toggle::On
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Toggle::On => "on",
            Toggle::Off => "off",
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mix clean speech with noise at exact SNRs and write a manifest.
    Mix(MixArgs),
    /// Train a predictor on a materialized corpus.
    Train(TrainArgs),
    /// Run one noisy WAV through a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score the test split against its clean references.
    Eval(EvalArgs),
    /// Print the topology and parameter budget of a configuration.
    Info(InfoArgs),
    /// Check every analytic gradient against finite differences (f64).
    SelfTest(SelfTestArgs),
}

#[derive(Args)]
struct MixArgs {
    /// Directory of clean speech WAVs.
    #[arg(long, value_name = "DIR")]
    clean_dir: PathBuf,
    /// Directory of noise WAVs; file stems name the categories.
    #[arg(long, value_name = "DIR")]
    noise_dir: PathBuf,
    /// Corpus root; the manifest lands at <DIR>/manifest.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Comma-separated mixture SNRs in dB.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-3,0,3,6,12"
    )]
    snrs: Vec<f64>,
    /// Cap entries per noise category (default: use every clean file once).
    #[arg(long, value_name = "N")]
    per_noise: Option<usize>,
    /// Split fractions; must sum to 1.
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest written by `rage mix`; pairs load from its directory.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Best-epoch checkpoint output; the final epoch lands next to it
    /// with a .last.rage suffix for resuming.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Stem width after the 2-channel input conv.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Encoder/decoder stages.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Attention gates on the skip connections.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    ag: Toggle,
    /// Reverse-attention triple decoder (requires attention gates).
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    ra: Toggle,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Stop after this many epochs without validation improvement.
    #[arg(long, default_value_t = 50)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// Random crop length per training example.
    #[arg(long, default_value_t = 2.0)]
    segment_seconds: f64,
    #[arg(long, value_enum, default_value_t = LossFlag::RiMseMag)]
    loss: LossFlag,
    #[arg(long, default_value_t = 512)]
    n_fft: usize,
    #[arg(long, default_value_t = 128)]
    hop: usize,
    /// Continue from the .last.rage checkpoint when it exists.
    #[arg(long)]
    resume: bool,
    /// Also write the per-epoch training report as JSON.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossFlag {
    /// Mean squared error over real/imaginary planes.
    RiMse,
    /// ri-mse plus 0.5x magnitude-spectrum MSE.
    RiMseMag,
}

impl fmt::Display for LossFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossFlag::RiMse => "ri-mse",
            LossFlag::RiMseMag => "ri-mse-mag",
        })
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Noisy input WAV.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Enhanced output WAV; same duration as the input.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score (mutually exclusive with --passthrough).
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "passthrough",
        required_unless_present = "passthrough"
    )]
    ckpt: Option<PathBuf>,
    /// Score the noisy mixtures themselves (untreated baseline).
    #[arg(long)]
    passthrough: bool,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Report JSON output path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// STFT analysis for the log-spectral distance; defaults to the
    /// checkpoint's own setting (512/128 under --passthrough).
    #[arg(long)]
    n_fft: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    ag: Toggle,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    ra: Toggle,
}

#[derive(Args)]
struct SelfTestArgs {
    /// Random trials per operation.
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

/// A numeric check that ran to completion and failed; distinct exit code so
/// scripts can tell it apart from bad flags or I/O trouble.
#[derive(Debug)]
struct NumericFailure(String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for NumericFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.global.threads.or_else(|| {
        std::env::var("RAGE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // Ignore the error from a pool that is already initialized.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }

    let result = match &cli.command {
        Command::Mix(args) => commands::mix(&cli.global, args),
        Command::Train(args) => commands::train(&cli.global, args),
        Command::Enhance(args) => commands::enhance(&cli.global, args),
        Command::Eval(args) => commands::eval(&cli.global, args),
        Command::Info(args) => commands::info(args),
        Command::SelfTest(args) => commands::self_test(&cli.global, args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// 2 for bad requests or bad input data, 3 for numeric failures detected at
/// runtime, 1 for everything else (I/O, corrupt files).
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericFailure>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<TrainerError>() {
            return trainer_code(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return metrics_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return dataset_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DspError>() {
            return dsp_code(e);
        }
    }
    1
}

fn trainer_code(e: &TrainerError) -> u8 {
    match e {
        TrainerError::NonFiniteGradient { .. } => 3,
        TrainerError::Invalid(_) => 2,
        TrainerError::Tensor(t) => tensor_code(t),
        TrainerError::Dataset(d) => dataset_code(d),
        TrainerError::Io { .. } | TrainerError::Format(_) => 1,
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::Invalid(_) | TensorError::ShapeMismatch { .. } => 2,
        _ => 1,
    }
}

fn dataset_code(e: &DatasetError) -> u8 {
    match e {
        DatasetError::Invalid(_) => 2,
        DatasetError::Dsp(d) => dsp_code(d),
        DatasetError::Entry { source, .. } => dataset_code(source),
        DatasetError::Io { .. } => 1,
    }
}

fn dsp_code(e: &DspError) -> u8 {
    match e {
        DspError::Config(_) | DspError::Invalid(_) | DspError::Format(_) => 2,
        DspError::Io(_) => 1,
    }
}

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::Invalid(_)
        | MetricsError::SilentReference(_)
        | MetricsError::MissingFiles(_) => 2,
        MetricsError::Dsp(d) => dsp_code(d),
        MetricsError::Dataset(d) => dataset_code(d),
        MetricsError::Model(t) => tensor_code(t),
    }
}
