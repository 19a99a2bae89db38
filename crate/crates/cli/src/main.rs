use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tilecast::experiment::{run_experiment, Experiment, ExperimentConfig};

/// Batch experiments for multi-lattice multicast of tiled 360-degree video.
#[derive(Parser)]
#[command(name = "tilecast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV.
    Run {
        /// table2, approx, qoe-sweep, mc-validate or group-audit.
        experiment: String,
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Evaluate seeds concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            experiment,
            config,
            out,
            seeds,
            parallel,
        } => {
            let Ok(experiment) = experiment.parse::<Experiment>() else {
                let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                eprintln!(
                    "error: unknown experiment {experiment:?}; expected one of {}",
                    names.join(", ")
                );
                return ExitCode::from(2);
            };
            match run(experiment, &config, out, seeds, parallel) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}

fn run(
    experiment: Experiment,
    config: &PathBuf,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    parallel: bool,
) -> Result<PathBuf> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)
        .with_context(|| format!("parsing {}", config.display()))?;
    if let Some(out) = out {
        cfg.run.out = out;
    }
    if let Some(seeds) = seeds {
        cfg.run.seeds = seeds;
        cfg.validate()?;
    }
    run_experiment(experiment, &cfg, parallel)
        .with_context(|| format!("running {}", experiment.name()))
}
