//! `squeezeseg`: dataset synthesis, training, inference and evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::manifest::Split;

/// Exit status classes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<squeezeseg::Error> for CliError {
    fn from(e: squeezeseg::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-frame work.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
}

#[derive(Debug, Parser)]
#[command(name = "squeezeseg", version, about = "LiDAR road-object segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project a point cloud to a spherical grid, or estimate a noise model
    /// from every cloud in a manifest.
    Project {
        #[arg(long, conflicts_with = "manifest")]
        cloud: Option<PathBuf>,
        #[arg(long, requires = "cloud")]
        labels: Option<PathBuf>,
        /// Grid output (TNSR).
        #[arg(long, requires = "cloud")]
        out: Option<PathBuf>,
        /// Label-grid output (TNSR); needs --labels.
        #[arg(long, requires = "labels")]
        labels_out: Option<PathBuf>,
        #[arg(long, requires = "noise_out")]
        manifest: Option<PathBuf>,
        /// Noise model output (TNSR).
        #[arg(long, requires = "manifest")]
        noise_out: Option<PathBuf>,
    },
    /// Generate a labeled dataset with the ray-casting simulator.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Training frames; seeds `seed .. seed+frames`.
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Validation frames; seeds follow the training range.
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the network on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Noise model injected into every training frame.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Predict per-point labels for every frame of a manifest.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for labels and a prediction manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Skip CRF refinement.
        #[arg(long)]
        no_crf: bool,
        /// Also write raw logits per frame.
        #[arg(long)]
        save_logits: bool,
    },
    /// CRF-refine saved logits of one frame.
    Refine {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        logits: PathBuf,
        /// Per-point label output.
        #[arg(long)]
        out: PathBuf,
        /// Refined probabilities (TNSR).
        #[arg(long)]
        probs_out: Option<PathBuf>,
    },
    /// Cluster labeled frames into instances.
    Cluster {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Class- and instance-level precision, recall and IoU.
    Eval {
        /// Ground-truth manifest.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction manifest, row-aligned with the ground truth.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Machine-readable report output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame runtime of the forward pass and of forward plus CRF.
    Bench {
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Benchmark trained weights instead of a seeded initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a label map or range image as PPM.
    Viz {
        #[arg(long)]
        cloud: PathBuf,
        /// Per-point labels; without them the range channel is drawn.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let common = cli.common;
    if common.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let cfg = config::Config::load(common.config.as_deref(), &common.overrides)?;
    let ctx = commands::Context::new(cfg, common.workers)?;
    match cli.command {
        Command::Project {
            cloud,
            labels,
            out,
            labels_out,
            manifest,
            noise_out,
        } => match (cloud, manifest, noise_out) {
            (Some(cloud), None, None) => {
                let out = out.ok_or_else(|| CliError::Usage("project --cloud needs --out".into()))?;
                ctx.project(&cloud, labels.as_deref(), &out, labels_out.as_deref())
            }
            (None, Some(m), Some(n)) => ctx.estimate_noise(&m, &n),
            _ => Err(CliError::Usage("project needs --cloud or --manifest with --noise-out".into())),
        },
        Command::Synth { out, frames, val, seed } => ctx.synth(&out, frames, val, seed),
        Command::Train {
            manifest,
            out,
            seed,
            epochs,
            noise,
        } => ctx.train(&manifest, &out, seed, epochs, noise.as_deref()),
        Command::Infer {
            manifest,
            checkpoint,
            out,
            split,
            no_crf,
            save_logits,
        } => ctx.infer(&manifest, &checkpoint, &out, split, !no_crf, save_logits),
        Command::Refine {
            cloud,
            logits,
            out,
            probs_out,
        } => ctx.refine(&cloud, &logits, &out, probs_out.as_deref()),
        Command::Cluster { manifest, out, split } => ctx.cluster(&manifest, &out, split),
        Command::Eval { gt, pred, split, out } => ctx.eval(&gt, &pred, split, out.as_deref()),
        Command::Bench {
            frames,
            seed,
            checkpoint,
        } => ctx.bench(frames, seed, checkpoint.as_deref()),
        Command::Viz { cloud, labels, out } => ctx.viz(&cloud, labels.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
