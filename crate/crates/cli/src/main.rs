//! `hemoseg`: phantom generation, cascade training, inference, evaluation
//! and volumetry from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or file format,
//! 4 numeric failure (non-finite loss or gradient).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hemoseg::Error;
use hemoseg_autodiff::TensorError;

#[derive(Parser)]
#[command(name = "hemoseg", version, about = "Cascaded 3D segmentation and bleeding volumetry")]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    GenPhantoms(GenPhantomsArgs),
    /// Train stage 1, stage 2, or the whole cascade.
    Train(TrainArgs),
    /// Segment one volume, or every image in a directory.
    Infer(InferArgs),
    /// Segmentation metrics of predicted masks against ground truth.
    Eval(EvalArgs),
    /// Bleeding volume of one mask.
    Volume(VolumeArgs),
    /// Volume MAE of ABC/2 and of predicted masks against ground truth.
    CompareTada(CompareArgs),
}

#[derive(Args)]
pub struct GenPhantomsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phantom keys (`phantom.*`), layered over `--config`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Cascade,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "cascade")]
    pub stage: Stage,
    /// Checkpoint file for a single stage; directory for the cascade.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint the stage-2 network is paired with.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Continue a single-stage run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct InferArgs {
    /// One checkpoint (single stage) or `STAGE1,STAGE2` (cascade).
    #[arg(long, value_delimiter = ',', num_args = 1..=2, required = true)]
    pub model: Vec<PathBuf>,
    /// Image RVOL, or a dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Mask RVOL, or a directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Sliding-window stride `DxHxW`; defaults to half the window.
    #[arg(long)]
    pub stride: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Defaults to `<pred>/metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Voxel,
    Tada,
}

#[derive(Args)]
pub struct VolumeArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, value_enum, default_value = "voxel")]
    pub method: Method,
    /// Defaults to `<mask>.volume.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Defaults to `<pred>/compare.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<hemoseg::ConfigError> for CliError {
    fn from(e: hemoseg::ConfigError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => 2,
            CliError::Lib(Error::NonFinite { .. } | Error::Tensor(TensorError::NonFinite { .. })) => 4,
            CliError::Lib(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::load_config(cli.config.as_deref()).and_then(|kv| match cli.command {
        Command::GenPhantoms(a) => commands::gen_phantoms(kv, &a),
        Command::Train(a) => commands::train(kv, &a),
        Command::Infer(a) => commands::infer(kv, &a),
        Command::Eval(a) => commands::eval(kv, &a),
        Command::Volume(a) => commands::volume(kv, &a),
        Command::CompareTada(a) => commands::compare_tada(kv, &a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hemoseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
