use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use warpsynth_cli::commands::{eval, phantom, register, sweep, synth};
use warpsynth_cli::config::RunConfig;
use warpsynth_cli::fail::{CliError, CliResult};

/// Registration-based image synthesis.
#[derive(Debug, Parser)]
#[command(name = "warpsynth", version)]
struct Cli {
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set registration.step_size=0.25`.
    /// Repeatable; later values win.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads. Defaults to the config, then WARPSYNTH_WORKERS, then 1.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a moving image to a fixed image.
    Register(register::RegisterArgs),
    /// Synthesize contrasts for a fixed image from an atlas manifest.
    Synth(synth::SynthArgs),
    /// Masked PSNR, SSIM and optional Dice between two images.
    Eval(eval::EvalArgs),
    /// Fusion quality against the number of atlases on phantom cohorts.
    Sweep(sweep::SweepArgs),
    /// Write a phantom cohort with truth fields and an atlas manifest.
    Phantom(phantom::PhantomArgs),
}

fn run(cli: &Cli) -> CliResult<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if cli.workers.is_some() {
        config.workers = cli.workers;
    }
    let workers = config.worker_count()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::other(format!("cannot start {workers} workers: {e}")))?;
    match &cli.command {
        Command::Register(a) => register::run(a, &config),
        Command::Synth(a) => synth::run(a, &config),
        Command::Eval(a) => eval::run(a),
        Command::Sweep(a) => sweep::run(a, &config),
        Command::Phantom(a) => phantom::run(a, &config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
