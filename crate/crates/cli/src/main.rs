use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedpull::experiment::{client_threads, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedpull", version, about = "Federated learning with dynamic tensor pulling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Check the config and exit without training.
        #[arg(long)]
        validate: bool,
        /// Number of seeds to run concurrently.
        #[arg(long, value_name = "N", default_value_t = 1)]
        seed_parallel: usize,
        /// Override the config's output_dir.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Config problems exit with 2, failures during a run with 1.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load(path: &Path, out: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(dir) = out {
        config.output_dir = dir;
    }
    config.validate().context("invalid config")?;
    client_threads()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let Command::Run {
        config,
        validate,
        seed_parallel,
        out,
    } = cli.command;
    let config = load(&config, out).map_err(Failure::Config)?;
    if validate {
        println!(
            "config ok: {} over {} domain(s), {} seed(s)",
            config.experiment.as_str(),
            config.domains.len(),
            config.seeds.len()
        );
        return Ok(());
    }
    let paths = run_experiment(&config, seed_parallel)
        .with_context(|| format!("running {}", config.experiment.as_str()))
        .map_err(Failure::Runtime)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
