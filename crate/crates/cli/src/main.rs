//! `diffmorph`: synthesize data, train, register, interpolate, generate
//! and evaluate.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
//! 4 numerical failure, 5 model or shape mismatch.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "diffmorph", version, about = "Diffusion-conditioned deformable image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of image pairs with known deformations.
    SynthData(SynthArgs),
    /// Train both networks from a configuration file.
    Train(TrainArgs),
    /// Register a moving image onto a fixed image in one pass.
    Register(RegisterArgs),
    /// Write the continuous family of registrations for a list of latent scales.
    Interpolate(InterpolateArgs),
    /// Generate a deformed image by truncated reverse diffusion from the moving image.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint on a dataset and write a CSV report.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Image side length in pixels (at least 16).
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the Gaussian that smooths the random field, in pixels.
    #[arg(long, default_value_t = 4.0)]
    blur: f64,
    /// Largest displacement in pixels.
    #[arg(long, default_value_t = 3.0)]
    max_mag: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (`key = value` lines). Relative paths inside
    /// it are resolved against the file's directory.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Moving image (DMT).
    #[arg(long)]
    moving: PathBuf,
    /// Fixed image (DMT).
    #[arg(long)]
    fixed: PathBuf,
    /// Where to write the displacement field (DMT, `[2, H, W]`).
    #[arg(long)]
    out_field: PathBuf,
    /// Where to write the warped moving image (DMT, `[1, H, W]`).
    #[arg(long)]
    out_warped: PathBuf,
    /// Also write a one-row metric report (CSV).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Comma-separated latent scales in [0, 1].
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    etas: String,
    /// Receives `eta_<η>.field.dmt`, `eta_<η>.warped.dmt` and `eta_<η>.warped.pgm`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Noise level the moving image is diffused to.
    #[arg(long, default_value_t = 200)]
    t_forward: usize,
    /// Reverse steps, evenly spaced over `1..=t-forward`.
    #[arg(long, default_value_t = 80)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output sample (DMT); a PGM preview is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Dump every intermediate state into `<out stem>_trajectory/`.
    #[arg(long)]
    save_trajectory: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with `manifest.txt`.
    #[arg(long)]
    data: PathBuf,
    /// Report path (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Add a column group from a network-free baseline (`classical`).
    #[arg(long, value_parser = ["classical"])]
    baseline: Option<String>,
    /// Baseline iterations.
    #[arg(long, default_value_t = 300)]
    iters: usize,
    /// Baseline step size in pixels.
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    /// Add an `initial_*` column group measured without any deformation.
    #[arg(long)]
    with_initial: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(&a.out, a.count, a.size, a.seed, a.blur, a.max_mag),
        Command::Train(a) => commands::train(&a.config),
        Command::Register(a) => {
            commands::register(&a.checkpoint, &a.moving, &a.fixed, &a.out_field, &a.out_warped, a.report.as_deref())
        }
        Command::Interpolate(a) => commands::interpolate(&a.checkpoint, &a.moving, &a.fixed, &a.etas, &a.out_dir),
        Command::Generate(a) => commands::generate(
            &a.checkpoint,
            &a.moving,
            &a.fixed,
            a.t_forward,
            a.steps,
            a.seed,
            &a.out,
            a.save_trajectory,
        ),
        Command::Evaluate(a) => commands::evaluate(
            &a.checkpoint,
            &a.data,
            &a.out,
            a.baseline.is_some().then_some((a.iters, a.step_size)),
            a.with_initial,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
