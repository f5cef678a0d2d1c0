//! Command-line front end: ERGM simulation, reference MCMC fits, the
//! amortised hierarchical fit, and diagnostics/reporting over run
//! directories.

mod artifacts;
mod cmd;
mod context;
mod csvio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const ENV_HELP: &str = "Environment variables (overridden by the flags above):
  AHSNPE_SEED     base RNG seed
  AHSNPE_THREADS  worker threads for parallel simulation
  AHSNPE_CONFIG   path to the JSON configuration file";

#[derive(Parser)]
#[command(name = "ahsnpe", version, about = "Hierarchical ERGM inference with amortised posteriors", after_help = ENV_HELP)]
struct Cli {
    /// Base RNG seed; falls back to the config file's seed, then 0.
    #[arg(long, global = true, env = "AHSNPE_SEED")]
    seed: Option<u64>,

    /// Worker threads for parallel simulation (default: all cores).
    #[arg(long, global = true, env = "AHSNPE_THREADS")]
    threads: Option<usize>,

    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, env = "AHSNPE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw networks at a fixed parameter vector and write their summary
    /// statistics as CSV.
    Simulate(cmd::simulate::Args),
    /// Fit one network's parameter posterior with the exchange algorithm.
    FitExchange(cmd::fit_exchange::Args),
    /// Fit the hierarchical model across networks by exchange-within-Gibbs.
    FitHierBayes(cmd::fit_hier_bayes::Args),
    /// Fit the hierarchical model with the amortised sequential estimator.
    FitAhsnpe(cmd::fit_ahsnpe::Args),
    /// Posterior summaries, predictive checks, and reference distances for
    /// a finished run.
    Diagnose(cmd::diagnose::Args),
    /// Render CSV tables and SVG plots from a run directory.
    Report(cmd::report::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let shared = context::Shared {
        seed: cli.seed,
        threads: cli.threads,
        config_path: cli.config,
    };
    let result = context::init_threads(shared.threads).and_then(|()| match cli.command {
        Command::Simulate(args) => cmd::simulate::run(&args, &shared),
        Command::FitExchange(args) => cmd::fit_exchange::run(&args, &shared),
        Command::FitHierBayes(args) => cmd::fit_hier_bayes::run(&args, &shared),
        Command::FitAhsnpe(args) => cmd::fit_ahsnpe::run(&args, &shared),
        Command::Diagnose(args) => cmd::diagnose::run(&args, &shared),
        Command::Report(args) => cmd::report::run(&args, &shared),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
