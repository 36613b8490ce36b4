//! Command-line workflow: data generation, training, inference with and
//! without test-time adaptation, evaluation, ablation sweeps and heatmaps.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure (including
//! unreadable or malformed input files).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

pub use commands::{EvalRow, SweepRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<msvos_core::Error> for CliError {
    fn from(e: msvos_core::Error) -> Self {
        match e {
            msvos_core::Error::Io { .. } | msvos_core::Error::Format { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "msvos", version, about = "Multi-scale video object segmentation with test-time adaptation")]
pub struct Cli {
    /// Root for outputs whose --out is omitted.
    #[arg(long, env = "MSVOS_OUT", default_value = "runs", global = true)]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model offline.
    Train(TrainArgs),
    /// Segment sequences without test-time adaptation.
    Infer(InferArgs),
    /// Segment sequences with test-time adaptation.
    Adapt(AdaptArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Sweep(SweepArgs),
    /// Write attention and variance heatmaps for one frame of a results directory.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON generator config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub scale_rate: Option<f64>,
    #[arg(long)]
    pub noise_drift: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunConfigArgs {
    /// JSON run config; missing keys take defaults, flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.ckpt, train.log and config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfigArgs,
    #[arg(long)]
    pub beta: Option<f64>,
    /// attention, average, small or large.
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfigArgs,
    /// First-frame fine-tuning steps per object.
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Also write attention and variance heatmaps for every frame.
    #[arg(long)]
    pub heatmaps: bool,
    /// Process sequences on all cores.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub infer: InferArgs,
    /// Adaptation steps per frame.
    #[arg(long)]
    pub steps: usize,
    /// Adaptation learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results directory with one `<id>/masks` per sequence.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    /// Writes metrics.txt and summary.txt here when given.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Boundary matching tolerance in pixels.
    #[arg(long, default_value_t = msvos_core::metrics::DEFAULT_TOLERANCE)]
    pub tolerance: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON grid: train and test dataset paths plus fusion, beta and steps axes.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train grid cells on all cores.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Output directory of an infer or adapt run.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub frame: usize,
    /// Only this sequence.
    #[arg(long)]
    pub sequence: Option<String>,
    /// Defaults to `<results>/inspect`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let root = cli.out_root;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, &root),
        Command::Train(a) => commands::train(a, &root),
        Command::Infer(a) => commands::infer(a, None, &root),
        Command::Adapt(a) => commands::infer(a.infer, Some((a.steps, a.lr)), &root),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a, &root),
        Command::Inspect(a) => commands::inspect(a),
    }
}
