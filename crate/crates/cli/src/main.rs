use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs: exit 2.
    Usage(String),
    /// Divergence, failed check or I/O trouble mid-run: exit 1.
    Failure(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<bflab::LabError> for CliError {
    fn from(e: bflab::LabError) -> Self {
        match e {
            bflab::LabError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bf-lab",
    version,
    about = "BatchFormer experiments on synthetic long-tailed data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config sources, applied in order: defaults, `--config`, `--set`, then
/// the dedicated flags.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set ratio=50`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batchformer: Option<Switch>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write metrics, run record and checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class cross-sample gradient report for a checkpoint.
    Probe(commands::ProbeArgs),
    /// One training run per (axis value, seed).
    Sweep(commands::SweepArgs),
    /// Finite-difference checks over every op and the full model.
    Gradcheck(commands::GradcheckArgs),
    /// Generate the synthetic dataset and write it as CSV.
    Dataset {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Eval { checkpoint, out } => commands::eval(&checkpoint, &out),
        Command::Probe(a) => commands::probe(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Dataset { config, out } => commands::dataset(&config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bf-lab: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Failure(_) => 1,
            })
        }
    }
}
