// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod errors;
mod spec;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{accountant::AccountantCmd, diagnose::DiagnoseCmd, fedsim::FedsimCmd, train::TrainCmd};

/// Differentially private SGD with geometry-guided noise.
#[derive(Debug, Parser)]
#[command(name = "hero-dp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model with sgd, dp-sgd or dp-hero.
    Train(TrainCmd),
    /// Report the privacy of a fixed-noise run, or calibrate sigma.
    Accountant(AccountantCmd),
    /// Simulate federated training over Dirichlet-partitioned clients.
    Fedsim(FedsimCmd),
    /// Measure utility gap, probe variance and noise alignment.
    Diagnose(DiagnoseCmd),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { errors::EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("HERO_DP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Train(c) => commands::train::run(c),
        Command::Accountant(c) => commands::accountant::run(c),
        Command::Fedsim(c) => commands::fedsim::run(c),
        Command::Diagnose(c) => commands::diagnose::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(errors::exit_code(&e))
        }
    }
}
