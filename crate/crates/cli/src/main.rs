//! `asae`: generate synthetic activations, train and evaluate sparse
//! autoencoders, compare dictionaries and check gradients.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2 for
//! runtime or numerical failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "asae", version, about = "Sparse autoencoders with aligned encoder training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic superposition data and write it as an SAEA file.
    GenData(GenDataArgs),
    /// Train one SAE from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a full activation file.
    Eval(EvalArgs),
    /// Symmetrized max-cosine agreement between two checkpoints' decoders.
    Compare(CompareArgs),
    /// Histogram of a checkpoint's alignment scores, as CSV.
    AlignHist(AlignHistArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Train every (mode, lambda, seed) combination and summarize.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long = "m-true")]
    pub m_true: usize,
    /// Per-feature firing probability.
    #[arg(long)]
    pub rho: f64,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Replace a config value, e.g. `train.lambda=0.05`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rows per forward pass; defaults to the checkpoint's batch size.
    #[arg(long)]
    pub chunk: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Args, Debug)]
pub struct AlignHistArgs {
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
    pub hi: f64,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Random instances, cycled over every variant combination.
    #[arg(long, default_value_t = 36, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// JSON run config used as the template for every run.
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to the config's lambda.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Defaults to the config's `seeds` list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "standard,aligned")]
    pub modes: Vec<String>,
    /// Defaults to the config's `out_dir`.
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(aligned_sae::Error::Config(_)) = cause.downcast_ref::<aligned_sae::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::AlignHist(a) => commands::align_hist(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
