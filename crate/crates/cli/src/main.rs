//! `pafm`: train, sample, and evaluate perturbation-aware flow matching
//! models for multivariate time series.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pafm_core::error::Error;

#[derive(Parser)]
#[command(
    name = "pafm",
    version,
    about = "Perturbation-aware flow matching for multivariate time series",
    after_help = "Exit codes: 0 success, 2 argument/config error, 3 data error, 4 numeric failure."
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Named dataset preset: sines, stocks, etth1, mujoco, energy, fmri.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,

    /// Preset size: `paper` hyperparameters or the reduced `desk` scale.
    #[arg(long, global = true, value_name = "SCALE", default_value = "paper")]
    pub preset_scale: String,

    /// Override one config field, e.g. --set train.sigma=0.05 (repeatable).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,

    /// Set the train, sampler, and eval seeds at once.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for outputs (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Source CSV file; overrides the configured data source and infers
    /// the feature count from the file.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,

    /// Window length override.
    #[arg(long, value_name = "LEN")]
    pub window: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Pre-built windows file (from `prepare`); requires --stats.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,

    /// Normalization stats file matching --data.
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,

    /// Ablation mode: full, no_frm, no_td, no_td_tpb.
    #[arg(long, value_name = "MODE")]
    pub ablation: Option<String>,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,

    /// Number of windows to generate.
    #[arg(short = 'n', long = "count", value_name = "N", default_value_t = 100)]
    pub n: usize,

    /// Euler integration steps override.
    #[arg(long, value_name = "STEPS")]
    pub steps: Option<usize>,

    /// Noise-level sweep, e.g. --sweep sigma=0.05,0.1,0.2.
    #[arg(long, value_name = "SPEC")]
    pub sweep: Option<String>,
}

#[derive(Args)]
pub struct ImputeArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,

    /// Windows file with the ground-truth series.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Fraction of cells to drop and reconstruct, in (0, 1).
    #[arg(long, value_name = "RATIO")]
    pub missing_ratio: f64,

    /// Process at most N windows from the data file.
    #[arg(short = 'n', long = "count", value_name = "N")]
    pub n: Option<usize>,

    /// Euler integration steps override.
    #[arg(long, value_name = "STEPS")]
    pub steps: Option<usize>,

    /// Noise-level sweep, e.g. --sweep sigma=0.05,0.1,0.2.
    #[arg(long, value_name = "SPEC")]
    pub sweep: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,

    /// Windows file with the ground-truth series.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Number of trailing timesteps to forecast.
    #[arg(long, value_name = "STEPS")]
    pub horizon: usize,

    /// Process at most N windows from the data file.
    #[arg(short = 'n', long = "count", value_name = "N")]
    pub n: Option<usize>,

    /// Euler integration steps override.
    #[arg(long, value_name = "STEPS")]
    pub steps: Option<usize>,

    /// Noise-level sweep, e.g. --sweep sigma=0.05,0.1,0.2.
    #[arg(long, value_name = "SPEC")]
    pub sweep: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Real (reference) windows file.
    #[arg(long, value_name = "FILE")]
    pub real: PathBuf,

    /// Synthetic windows file to score against it.
    #[arg(long, value_name = "FILE")]
    pub synth: PathBuf,

    /// Export the two-component PCA projection of both sets.
    #[arg(long)]
    pub export_pca: bool,

    /// Export per-feature value histograms of both sets.
    #[arg(long)]
    pub export_histograms: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a windowed, normalized dataset with its stats file.
    Prepare(PrepareArgs),
    /// Train a velocity field; writes checkpoint, loss log, and report.
    Train(TrainArgs),
    /// Generate windows from a trained checkpoint.
    Sample(SampleArgs),
    /// Reconstruct randomly missing cells of real windows.
    Impute(ImputeArgs),
    /// Forecast the trailing timesteps of real windows.
    Predict(PredictArgs),
    /// Score a synthetic window set against a real one.
    Eval(EvalArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Csv(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(args) => commands::cmd_prepare(&cli.common, args),
        Command::Train(args) => commands::cmd_train(&cli.common, args),
        Command::Sample(args) => commands::cmd_sample(&cli.common, args),
        Command::Impute(args) => commands::cmd_impute(&cli.common, args),
        Command::Predict(args) => commands::cmd_predict(&cli.common, args),
        Command::Eval(args) => commands::cmd_eval(&cli.common, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
