//! `ldh`: train, hide, reveal, attack and evaluate local deep hiding models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldh_core::LdhError;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ldh", version, about = "Local deep hiding image steganography")]
pub struct Cli {
    /// RNG seed; falls back to LDH_SEED, then 0.
    #[arg(long, global = true, env = "LDH_SEED")]
    pub seed: Option<u64>,
    /// JSON training/network config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Model checkpoint to read (or, for train, to resume from).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Run without data parallelism.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Train the three networks on a dataset manifest.
    Train(commands::TrainArgs),
    /// Hide one or more secrets in a cover.
    Hide(commands::HideArgs),
    /// Locate and reveal the secrets in a stego image.
    Reveal(commands::RevealArgs),
    /// Apply a distortion or crop attack to a stego image.
    Attack(commands::AttackArgs),
    /// Quality and robustness tables on a test manifest.
    Evaluate(commands::EvaluateArgs),
    /// Highest embedding rate meeting PSNR thresholds.
    Rate(commands::RateArgs),
    /// Write a synthetic image set and its manifest.
    Synth(commands::SynthArgs),
}

/// Flags shared by every command, echoed into the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Globals {
    /// Seed from the flag or environment, if any.
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub sequential: bool,
}

impl Globals {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    NoRegions,
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Other(_) => 1,
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::NoRegions => 4,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<LdhError>() {
            Some(
                LdhError::Config(_)
                | LdhError::Distortion(_)
                | LdhError::Checkpoint(_)
                | LdhError::Overcrowded { .. }
                | LdhError::Overlap(_)
                | LdhError::OutOfBounds(_),
            ) => Self::Config(e),
            Some(
                LdhError::Io { .. }
                | LdhError::Decode { .. }
                | LdhError::UnsupportedFormat { .. }
                | LdhError::Shape(_)
                | LdhError::EmptyDataset,
            ) => Self::Data(e),
            _ => Self::Other(e),
        }
    }
}

impl From<LdhError> for Failure {
    fn from(e: LdhError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = Globals {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
        checkpoint: cli.checkpoint,
        sequential: cli.sequential,
    };
    if globals.sequential {
        ldh_core::exec::set_mode(ldh_core::exec::Mode::Sequential);
    }
    match commands::run(&globals, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::NoRegions => eprintln!("error: no embedded regions detected"),
                Failure::Config(e) | Failure::Data(e) | Failure::Other(e) => {
                    eprintln!("error: {e:#}")
                }
            }
            ExitCode::from(f.code())
        }
    }
}
