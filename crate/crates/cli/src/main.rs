//! `cadis`: train patch priors on clean images, denoise, and run experiment
//! grids.

mod commands;
mod config_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cadis_core::error::CoreError;
use cadis_core::imaging::ImageIoError;
use cadis_core::model_io::ModelIoError;

/// Class-adapted patch-based image denoising.
#[derive(Debug, Parser)]
#[command(name = "cadis", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a cluster-of-patches prior from clean images.
    Train(TrainArgs),
    /// Denoise one noisy image with a trained model.
    Denoise(DenoiseArgs),
    /// Run a sigma x seed experiment grid over a test set.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic text-image dataset.
    GenData(GenDataArgs),
}

/// Knobs shared by every subcommand that runs the pipeline. Values resolve
/// as defaults, then the optional config file, then explicit flags.
#[derive(Debug, Args, Clone, Default)]
struct CommonArgs {
    /// TOML config file with the same keys as these flags.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Number of mixture clusters.
    #[arg(long)]
    clusters: Option<usize>,

    /// Generalized Gaussian shape parameter.
    #[arg(long)]
    beta: Option<f64>,

    /// Clean patches sampled per noisy patch.
    #[arg(long)]
    samples: Option<usize>,

    /// Hard importance-weight threshold.
    #[arg(long)]
    tau: Option<f64>,

    /// Square patch side in pixels.
    #[arg(long)]
    patch_side: Option<usize>,

    /// Patch grid stride when denoising.
    #[arg(long)]
    stride: Option<usize>,

    /// Patch grid stride for training extraction.
    #[arg(long)]
    train_stride: Option<usize>,

    /// Boost blend factor for the second pass.
    #[arg(long)]
    r: Option<f64>,

    /// Number of denoising passes (1 or 2).
    #[arg(long)]
    passes: Option<u32>,

    /// Base seed for all stochastic stages.
    #[arg(long)]
    seed: Option<u64>,

    /// Estimation mode: full-patch or central-pixel.
    #[arg(long)]
    mode: Option<String>,

    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of clean training images (uses its `train/` subdirectory
    /// when present).
    #[arg(long)]
    data: PathBuf,

    /// Output model file.
    #[arg(long)]
    model: PathBuf,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,

    /// Noisy input image (PGM or 8-bit grayscale PNG).
    #[arg(long)]
    input: PathBuf,

    /// Output image (written as binary PGM).
    #[arg(long)]
    output: PathBuf,

    /// Noise standard deviation of the input.
    #[arg(long)]
    sigma: f64,

    /// Clean reference; enables PSNR reporting.
    #[arg(long)]
    clean: Option<PathBuf>,

    /// Per-run report CSV path.
    #[arg(long)]
    report: Option<PathBuf>,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Dataset root (uses its `test/` subdirectory when present).
    #[arg(long)]
    data: PathBuf,

    /// Trained model file.
    #[arg(long)]
    model: PathBuf,

    /// Output directory for report.csv, summary.csv and denoised images.
    #[arg(long)]
    out: PathBuf,

    /// Comma-separated noise levels.
    #[arg(long, default_value = "20,30,40,50")]
    sigma: String,

    /// Comma-separated run seeds.
    #[arg(long, default_value = "1")]
    seeds: String,

    /// Write wall_ms as 0 so repeated runs emit identical bytes.
    #[arg(long)]
    fixed_timing: bool,

    /// Skip writing denoised images (reports only).
    #[arg(long)]
    no_images: bool,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output dataset root; creates train/ and test/ inside.
    #[arg(long)]
    out: PathBuf,

    /// Training images to generate.
    #[arg(long, default_value_t = 20)]
    train: usize,

    /// Test images to generate.
    #[arg(long, default_value_t = 5)]
    test: usize,

    /// Square image size in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,

    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit codes: 2 usage or invalid parameters, 3 file I/O, 4 malformed file
/// content, 5 insufficient data, 1 anything else.
fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::InvalidParameter { .. } => 2,
        CoreError::ImageIo(ImageIoError::Io(_)) | CoreError::ModelIo(ModelIoError::Io(_)) => 3,
        CoreError::ImageIo(_) | CoreError::ModelIo(_) => 4,
        CoreError::InsufficientData { .. } | CoreError::EmptyInput(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Denoise(args) => commands::denoise_cmd(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::GenData(args) => commands::gen_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
