mod commands;
mod config;
mod output;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use segpre::data::Domain;
use segpre::trainer::Arm;

/// Errors raised by the driver itself; library errors pass through as
/// `segpre::Error`.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Dependency(String),
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DEPENDENCY: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// Images not selected for fine-tuning.
    Holdout,
    /// The fine-tuning selection.
    Train,
    All,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: segpre::Error| e.to_string())
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse().map_err(|e: segpre::Error| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(format!("{f} is outside (0, 1]"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "segpre", version, about = "Two-domain pre-training and few-shot fine-tuning for instance segmentation")]
pub struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true, env = "SEGPRE_SEED")]
    pub seed: Option<u64>,
    /// Threads for data loading and evaluation; results do not depend on it.
    #[arg(long, global = true, env = "SEGPRE_WORKERS")]
    pub workers: Option<usize>,
    /// TOML config with [pretrain], [amt2], [moco], [finetune], [model], [optimizer] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set finetune.steps=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "segpre-out")]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Comparison arm: scratch, coco, cells-moco, coco-pp, cupre, cupre-mm, cupre-pp.
    #[arg(long, global = true, default_value = "cupre", value_parser = parse_arm)]
    pub arm: Arm,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic COCO-format dataset (PNG images + annotations.json) in --out.
    Synth {
        #[arg(long, value_parser = parse_domain)]
        domain: Domain,
        #[arg(short = 'n', long = "num-images", value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(32..))]
        size: u64,
    },
    /// Supervised pre-training on an annotated natural-image dataset.
    PretrainCoco {
        #[arg(long)]
        coco: PathBuf,
    },
    /// Alternating MoCo / adaption phases (or MoCo only, for the cells-moco and coco-pp arms).
    Amt2 {
        #[arg(long)]
        coco: Option<PathBuf>,
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        reset_queue_per_iter: bool,
        #[arg(long)]
        freeze_backbone_in_adaption: bool,
    },
    /// Few-shot fine-tuning on a fraction of an annotated cell dataset.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05, value_parser = parse_fraction)]
        fraction: f64,
        #[arg(long)]
        l2sp_finetune: bool,
        /// Evaluate the holdout every N steps and write reports/finetune_curve.csv.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        curve_every: Option<u64>,
    },
    /// Evaluate a checkpoint (default: checkpoints/finetune.ckpt) on a dataset split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Holdout)]
        split: Split,
        /// Few-shot fraction defining the split; defaults to the checkpoint's.
        #[arg(long, value_parser = parse_fraction)]
        fraction: Option<f64>,
        /// Write overlay PNGs for the first N evaluated images.
        #[arg(long, default_value_t = 0)]
        overlays: usize,
        /// Minimum score drawn in overlays.
        #[arg(long, default_value_t = 0.3)]
        overlay_score: f64,
        /// Event log to summarize into reports/loss_curve.csv.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Every phase the arm needs, then evaluation on the holdout.
    Run {
        #[arg(long)]
        coco: Option<PathBuf>,
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05, value_parser = parse_fraction)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        overlays: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Data(_) => EXIT_DATA,
                CliError::Dependency(_) => EXIT_DEPENDENCY,
            };
        }
        if let Some(e) = cause.downcast_ref::<segpre::Error>() {
            return match e {
                segpre::Error::Argument(_) => EXIT_USAGE,
                segpre::Error::Diverged(_) => 1,
                _ => EXIT_DATA,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
