//! `punet`: train, evaluate, and verify product-unit residual networks.
//!
//! Exit codes: 0 success, 1 failed checks, 2 configuration error,
//! 3 data/checkpoint error, 4 numerical divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{apply_preset, load_config_file, parse_split, RunConfig};
use punet::error::{Error, Result};

#[derive(Parser)]
#[command(name = "punet", version, about = "Product-unit residual network trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Architecture name (pure18, pure34, resnet18, resnet34, pure20..pure272,
    /// resnet20..resnet272).
    #[arg(long)]
    arch: Option<String>,
    /// Dataset: synthetic[:n_per_class], cifar10:<dir>, or folder:<dir>.
    #[arg(long)]
    dataset: Option<String>,
    /// Train/val/test fractions, e.g. 0.9,0.05,0.05.
    #[arg(long)]
    split: Option<String>,
    /// Hyperparameter preset: galaxy-pure, galaxy-resnet, imagenet-pure,
    /// cifar-pure, cifar-pure-long.
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file (a run manifest also works); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay.
    #[arg(long)]
    wd: Option<f64>,
    /// none, multistep:<e1,e2,...>:<factor>, or plateau:<factor>:<patience>.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Global-norm gradient clipping threshold.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Static training-set augmentation: none or static.
    #[arg(long)]
    augment: Option<String>,
    /// Poisson noise photon-count scale.
    #[arg(long)]
    noise_peak: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, best/final checkpoints, and a run
    /// manifest into --out.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for all artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on clean and Poisson-corrupted test sets and
    /// report the relative drop.
    NoiseEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient-check registry; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter manifest and total for an architecture.
    Params {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

/// Resolution order: defaults < config file < --preset < flags.
/// A config file is already fully resolved (its recorded preset is kept as
/// provenance, not re-applied).
fn resolve(common: &CommonArgs, seed_required: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(name) = &common.preset {
        apply_preset(&mut cfg, name)?;
    }
    if let Some(v) = &common.arch {
        cfg.arch = v.clone();
    }
    if let Some(v) = &common.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &common.split {
        cfg.split = parse_split(v)?;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = common.lr {
        cfg.lr = v;
    }
    if let Some(v) = common.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = common.wd {
        cfg.weight_decay = v;
    }
    if let Some(v) = &common.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    } else if seed_required && common.config.is_none() {
        return Err(Error::InvalidConfig(
            "--seed is required for training runs".into(),
        ));
    }
    if let Some(v) = common.grad_clip {
        cfg.grad_clip = Some(v);
    }
    if let Some(v) = &common.augment {
        cfg.augment = v.clone();
    }
    if let Some(v) = common.noise_peak {
        cfg.noise_peak = v;
    }
    if cfg.arch.is_empty() {
        return Err(Error::InvalidConfig("--arch is required".into()));
    }
    Ok(cfg)
}

fn run() -> std::result::Result<(), (Error, i32)> {
    punet::util::configure_threads_from_env();
    let cli = Cli::parse();
    let outcome: Result<bool> = match &cli.command {
        Command::Train { common, out } => resolve(common, true)
            .and_then(|cfg| commands::cmd_train(&cfg, out))
            .map(|_| true),
        Command::Eval { common, checkpoint, out } => resolve(common, false)
            .and_then(|cfg| commands::cmd_eval(&cfg, checkpoint, out.as_deref()))
            .map(|_| true),
        Command::NoiseEval { common, checkpoint, out } => resolve(common, false)
            .and_then(|cfg| commands::cmd_noise_eval(&cfg, checkpoint, out.as_deref()))
            .map(|_| true),
        Command::Gradcheck { seed, out } => commands::cmd_gradcheck(*seed, out.as_deref()),
        Command::Params { arch, classes } => {
            commands::cmd_params(arch, *classes).map(|_| true)
        }
    };
    match outcome {
        Ok(true) => Ok(()),
        Ok(false) => Err((Error::InvalidConfig("checks failed".into()), 1)),
        Err(err) => {
            let code = commands::exit_code_for(&err);
            Err((err, code))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, code)) => {
            eprintln!("error: {err}");
            ExitCode::from(code as u8)
        }
    }
}
