//! `semiseg`: phantom generation, training, evaluation and the ablation
//! table.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semiseg_core::trainer::{Mode, SupervisedLoss};

#[derive(Debug, Parser)]
#[command(
    name = "semiseg",
    version,
    about = "Semi-supervised segmentation on synthetic head phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset file.
    GenData(GenDataArgs),
    /// Train one configuration and evaluate it.
    Train(TrainArgs),
    /// Run the six-row ablation and write markdown and CSV tables.
    Ablation(AblationArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Recompute the output digests recorded in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the per-pixel intensity noise.
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    /// Relative jitter of every structure's size and position.
    #[arg(long, default_value_t = 0.08)]
    pub jitter: f64,
}

/// Where the held-out evaluation set comes from.
#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    /// Separate dataset used for evaluation; overrides --test-fraction.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Fraction of --data held out for evaluation before the labeled split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = semiseg_core::optim::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = semiseg_core::losses::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = semiseg_core::losses::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub labeled_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate every N steps; 0 evaluates only at the end.
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_labeled: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_unlabeled: usize,
    /// Loss on labeled pixels.
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    pub supervised_loss: LossArg,
    /// Weight on the loss in supervised modes (0.5 matches the labeled term
    /// of a semi-supervised step).
    #[arg(long, default_value_t = 1.0)]
    pub supervised_weight: f64,
    /// Width of the first U-Net level.
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LossArg {
    Ce,
    BetaCe,
}

impl From<LossArg> for SupervisedLoss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => SupervisedLoss::Ce,
            LossArg::BetaCe => SupervisedLoss::BetaCe,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub test: TestArgs,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub test: TestArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the CSV here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label; defaults to the checkpoint's mode.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Path to a manifest.json.
    pub manifest: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: semiseg_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Ablation(a) => commands::ablation(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
