//! `fvib`: train once, then sweep, calibrate and evaluate any `β`.
//!
//! Exit codes: 0 success, 1 internal error, 2 config error, 3 data error,
//! 4 numeric-verification failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "fvib", version, about = "Flexible variational information bottleneck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a training-log CSV.
    Train(TrainArgs),
    /// Instantiate a trained FVIB model across a β grid and write IB-curve rows.
    Sweep(EvalArgs),
    /// Compare β = 0, grid-selected β, optimized β and temperature scaling.
    Calibrate(EvalArgs),
    /// Test accuracy, NLL and ECE for each β (or at a baseline's β).
    Eval(EvalArgs),
    /// Run the numeric identity suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; the training log goes next to it.
    #[arg(long, default_value = "checkpoint.json")]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `eval.samples` as the checkpoint's default sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Overrides `model.confidence_tuning`.
    #[arg(long, value_enum)]
    pub ct: Option<Switch>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data and eval settings; defaults to the data recorded in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated β values in [0, 1].
    #[arg(long)]
    pub beta_grid: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ct: Option<Switch>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb the target matrix to check that the simplex suite notices.
    #[arg(long, hide = true)]
    pub corrupt_target_matrix: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Verification => eprintln!("error: numeric verification failed"),
                Failure::Config(e) | Failure::Data(e) | Failure::Internal(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
