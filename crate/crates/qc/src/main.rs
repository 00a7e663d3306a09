use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qc::{cmd_eval, cmd_phantom, cmd_refsize, cmd_run, Overrides, RunConfig, EXIT_CONFIG};

/// Segmentation quality control by reverse classification accuracy.
#[derive(Parser)]
#[command(name = "qc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict the quality of every case segmentation.
    Run(Common),
    /// Predict and compare against ground truth.
    Eval(Common),
    /// Write a synthetic battery with manifests.
    Phantom(Common),
    /// Accuracy as a function of reference set size.
    Refsize(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    dsc_threshold: Option<f64>,
    #[arg(long)]
    msd_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (run, args): (fn(&RunConfig) -> Result<i32, qc::ConfigError>, Common) = match cli.command {
        Command::Run(a) => (cmd_run, a),
        Command::Eval(a) => (cmd_eval, a),
        Command::Phantom(a) => (cmd_phantom, a),
        Command::Refsize(a) => (cmd_refsize, a),
    };
    let overrides = Overrides {
        workers: args.workers,
        dsc_threshold: args.dsc_threshold,
        msd_threshold: args.msd_threshold,
        seed: args.seed,
    };
    let code = match RunConfig::load(&args.config, overrides).and_then(|cfg| run(&cfg)) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            EXIT_CONFIG
        }
    };
    ExitCode::from(code as u8)
}
