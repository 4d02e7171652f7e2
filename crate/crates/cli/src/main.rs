//! `elicit`: fit priors from a configuration file and export diagnostics.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elicit_core::{Error, ErrorKind};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "elicit", version, about = "Simulation-based prior elicitation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train priors and write a bundle plus history, comparison and prior CSVs.
    Fit {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Expert data file replacing the configuration's `expert` section.
        #[arg(long)]
        expert: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        svg: bool,
    },
    /// Export loss, hyperparameter, comparison and prior-summary tables from a bundle.
    Diagnose {
        bundle: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
    /// Weight replications by final loss and pool their prior draws.
    Average {
        bundle: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        pool: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the expert-data skeleton a configuration expects.
    Template { config: PathBuf },
    /// Simulate expert statistics under known hyperparameters.
    SimulateExpert {
        config: PathBuf,
        /// Comma-separated `name=value` pairs on the constrained scale.
        #[arg(long)]
        truth: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process outcome: success, invalid input, or a numerical abort.
pub enum Failure {
    Error(Error),
    /// Some replications failed numerically; outputs were still written.
    Runs(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Fit { config, runs, out, expert, seed, epochs, svg } => {
            commands::fit(&config, runs, &out, expert.as_deref(), seed, epochs, svg)
        }
        Command::Diagnose { bundle, out, svg } => commands::diagnose(&bundle, &out, svg),
        Command::Average { bundle, out, pool, seed } => commands::average(&bundle, &out, pool, seed),
        Command::Template { config } => commands::template(&config),
        Command::SimulateExpert { config, truth, samples, seed, out } => {
            commands::simulate_expert(&config, &truth, samples, seed, out.as_deref())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runs(n)) => {
            eprintln!("error[run-failed]: {n} replication(s) aborted on non-finite values");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error[{}]: {}", e.tag(), one_line(&e.to_string()));
            match e.kind() {
                ErrorKind::Validation => ExitCode::from(1),
                ErrorKind::Numerical => ExitCode::from(2),
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
