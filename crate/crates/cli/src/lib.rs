//! Experiment entry point: config handling, subcommands and run outputs.

pub mod commands;
pub mod config;
pub mod convergence;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use transrec::corpus::CorpusError;
use transrec::eval::EvalError;
use transrec::gradcheck::GradCheckError;
use transrec::pipeline::{PipelineError, TransferMode};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self { code: e.exit_code(), message: e.to_string() }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let code = if matches!(e, CorpusError::ConfigInvalid(_) | CorpusError::BadFraction(_)) { EXIT_CONFIG } else { EXIT_DATA };
        Self { code, message: e.to_string() }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<GradCheckError> for CliError {
    fn from(e: GradCheckError) -> Self {
        let code = match e {
            GradCheckError::ToleranceExceeded { .. } => EXIT_VERIFY,
            GradCheckError::PrecisionUnsupported => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "transrec", version, about = "Train, transfer and evaluate two-tower sequential recommenders")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Cut-off for HR@K / NDCG@K.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Drop the user's history from the ranked candidates.
    #[arg(long, global = true)]
    pub mask_history: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source and target domains as JSON lines.
    GenData,
    /// Stage 1: next-item pre-training of the user encoder on the source.
    PretrainUser {
        #[arg(long)]
        stage1_freeze_items: bool,
    },
    /// Stage 2: contrastive end-to-end training on the source.
    Train {
        /// Stage-1 checkpoint to initialise from.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long)]
        force_compat: bool,
    },
    /// Train on a target domain from scratch or from a checkpoint.
    Adapt {
        #[arg(long, default_value = "finetune", value_parser = parse_mode)]
        mode: TransferMode,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Target domain name; `corpus.target` when absent.
        #[arg(long)]
        domain: Option<String>,
        /// Fraction of target users kept; `experiment.target_fraction` when absent.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        force_compat: bool,
    },
    /// Full-catalog HR@K / NDCG@K of a checkpoint on a domain.
    Eval {
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
    },
    /// Relative improvement of one metrics CSV over another.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference verification of every model fragment.
    GradCheck,
    /// Source pre-training followed by every target in every transfer mode.
    ExperimentMatrix,
    /// Merge the per-epoch logs of several runs into one CSV.
    Convergence { run_dirs: Vec<PathBuf> },
}

fn parse_mode(s: &str) -> Result<TransferMode, String> {
    s.parse()
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
