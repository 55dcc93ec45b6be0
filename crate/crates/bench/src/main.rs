use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod check;
mod config;
mod gradcheck_cmd;
mod report;
mod runner;

use config::{ConfigError, ExperimentConfig};

/// Benchmark harness for the constrained knowledge-gradient optimizer.
#[derive(Parser)]
#[command(name = "bench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a seeded experiment matrix from a TOML config.
    Run {
        config: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's worker count.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate a finished run directory into report.md and plot_data.tsv.
    Report { dir: PathBuf },
    /// Run the quick oracle/invariant suite.
    Check,
    /// Verify the acquisition gradient estimator against common-random-number
    /// finite differences on a named fixture.
    Gradcheck {
        /// Fixture name; `list` prints the available ones.
        fixture: String,
        #[arg(long, default_value_t = 20_000)]
        replications: usize,
        #[arg(long, default_value_t = 1e-4)]
        fd_step: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write per-replication gradient samples to this JSONL file.
        #[arg(long)]
        dump_gradient_samples: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, jobs } => {
            let mut parsed = match ExperimentConfig::parse(&config) {
                Ok(c) => c,
                Err(e @ (ConfigError::Invalid(_) | ConfigError::Syntax(_))) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed {
                parsed.base_seed = s;
            }
            let jobs = jobs.unwrap_or(parsed.jobs);
            match runner::run_matrix(&parsed, jobs) {
                Ok(0) => ExitCode::SUCCESS,
                Ok(failed) => {
                    eprintln!("{failed} run(s) failed");
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("matrix execution failed: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Report { dir } => match report::report(&dir) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("report failed: {e:#}");
                ExitCode::from(1)
            }
        },
        Command::Check => {
            let failures = check::check();
            if failures == 0 {
                ExitCode::SUCCESS
            } else {
                eprintln!("{failures} check(s) failed");
                ExitCode::from(1)
            }
        }
        Command::Gradcheck {
            fixture,
            replications,
            fd_step,
            seed,
            dump_gradient_samples,
        } => match gradcheck_cmd::gradcheck_cmd(
            &fixture,
            replications,
            fd_step,
            seed,
            dump_gradient_samples.as_deref(),
        ) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("gradcheck failed: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
