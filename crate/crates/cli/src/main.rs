//! `mmgc`: generate datasets, condense them, and evaluate condensed graphs.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmgc_core::{Architecture, Mode};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "mmgc", version, about = "Multimodal graph condensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multimodal SBM dataset with planted modality conflict.
    GenSynth(GenSynthArgs),
    /// Condense a dataset into a small synthetic graph.
    Condense(CondenseArgs),
    /// Train on a condensed graph and test on the original graph.
    Eval(EvalArgs),
    /// Sample a class-stratified random coreset in the condensed format.
    BaselineRandom(BaselineArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory; must not exist unless --force is given.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 2000)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    d_text: usize,
    #[arg(long, default_value_t = 32)]
    d_image: usize,
    /// Intra-class edge probability.
    #[arg(long, default_value_t = 0.05)]
    p_in: f64,
    /// Inter-class edge probability.
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    /// Probability that a node's image features come from another class.
    #[arg(long, default_value_t = 0.6)]
    conflict: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WallMs {
    /// Record measured milliseconds per step.
    Measured,
    /// Write 0 so that metrics files are byte-reproducible.
    Zero,
}

#[derive(Debug, Args)]
struct CondenseArgs {
    /// Dataset directory to condense.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 0.01)]
    ratio: f64,
    #[arg(long, default_value_t = 500.0)]
    lambda: f64,
    #[arg(long, default_value = "srgm", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, default_value_t = 20)]
    outer: usize,
    #[arg(long, default_value_t = 10)]
    inner: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr_feat: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_phi: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge weights below this are dropped from the saved adjacency.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    generator_hidden: usize,
    /// Real nodes sampled per class and step (default: all).
    #[arg(long)]
    real_batch: Option<usize>,
    #[arg(long, value_enum, default_value_t = WallMs::Measured)]
    wall_ms: WallMs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Condensed (or coreset) directory to train on.
    #[arg(long)]
    condensed: PathBuf,
    /// Original dataset directory to test on.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value = "gcn", value_parser = parse_arch)]
    model: Architecture,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 600)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Re-sparsify the condensed adjacency at this threshold before training.
    /// Has no effect with --model mlp, which never reads the adjacency.
    #[arg(long)]
    threshold: Option<f64>,
    /// Propagate over the test-induced subgraph only.
    #[arg(long)]
    inductive: bool,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 0.01)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Failed(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Numerical(_) => 3,
            Self::Incompatible(_) => 4,
            Self::Failed(_) => 1,
        }
    }
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("MMGC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("MMGC_THREADS must be a positive integer, got `{v}`"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads_from_env().and_then(|threads| match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a, threads),
        Command::Condense(a) => commands::condense(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::BaselineRandom(a) => commands::baseline_random(a, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmgc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
