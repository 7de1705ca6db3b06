//! Command-line front end: resolves a plain-text configuration, pins the
//! worker pool, and dispatches to the experiment runners. Exit codes:
//! 0 success, 1 configuration or runtime error, 2 enabled checks failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icadyn::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "icadyn",
    version,
    about = "Simulation and verification laboratory for projected SGD dynamics of tensor-based ICA"
)]
struct Cli {
    /// Path to a `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the logical CPU count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print the resolved configuration and write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Moment table, cross moments and printed-formula comparison.
    Moments,
    /// Monte-Carlo ensemble with trajectory CSVs and a phase summary.
    Simulate,
    /// Integrate the coordinate ODE; gapped starts add traverse bounds.
    Ode,
    /// One Euler-Maruyama path of the configured linearized limit.
    Sde,
    /// Phase boundaries and predictions over the step-size grid.
    Phases {
        /// Run factor-of-two scaling checks; exit code 2 on failure.
        #[arg(long)]
        check: bool,
    },
    /// Repeat runs until every component is recovered.
    Collect,
    /// Oracle and discrepancy suite; exit code 2 on engine failures.
    Validate,
    /// Ensemble-mean objective and alignment per recorded iteration.
    Plotdata,
}

fn run(cli: Cli) -> icadyn::Result<u8> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.out.clone(), cli.workers);
    if let Some(workers) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| icadyn::Error::Config(format!("worker pool: {e}")))?;
    }
    if cli.dry_run {
        print!("{}", cfg.resolved_text());
        return Ok(0);
    }
    match cli.cmd {
        Cmd::Moments => experiment::run_moments(&cfg)?,
        Cmd::Simulate => experiment::run_simulate(&cfg)?,
        Cmd::Ode => experiment::run_ode(&cfg)?,
        Cmd::Sde => experiment::run_sde(&cfg)?,
        Cmd::Phases { check } => {
            if !experiment::run_phases(&cfg, check)? {
                return Ok(2);
            }
        }
        Cmd::Collect => experiment::run_collect(&cfg)?,
        Cmd::Validate => {
            if !experiment::run_validate()? {
                return Ok(2);
            }
        }
        Cmd::Plotdata => experiment::run_plotdata(&cfg)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
