use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prunefire_cli::commands;
use prunefire_cli::config::RunConfig;
use prunefire_cli::error::Result;

#[derive(Parser)]
#[command(
    name = "prunefire",
    about = "Train, prune, and evaluate fire-module face-embedding CNNs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// run configuration file (sectioned key = value; defaults when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic identity dataset
    Synth,
    /// Train a model on the manifest's train split
    Train,
    /// Run the iterative prune/retrain session on a trained checkpoint
    Prune,
    /// Score the verification protocol and compute EERs for a checkpoint
    Eval,
    /// Render the run's CSV logs as SVG charts
    Report,
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    match cli.command {
        Command::Synth => commands::synth::run(&cfg),
        Command::Train => commands::train::run(&cfg),
        Command::Prune => commands::prune::run(&cfg),
        Command::Eval => commands::eval::run(&cfg),
        Command::Report => commands::report::run(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
