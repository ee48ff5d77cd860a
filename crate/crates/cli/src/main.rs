//! `contagion`: solve, simulate, sweep and check the default-contagion
//! portfolio model.
//!
//! Exit codes: 0 success, 1 file I/O, 2 validation or usage, 3 solver,
//! 4 a statistical test failed. `CONTAGION_THREADS` caps the worker threads;
//! `1` runs everything sequentially. Results do not depend on it.

// `!(x > a)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::Failure;
use config::{Command, Overrides, RunConfig};
use contagion_core::Execution;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "contagion", version, about = "Optimal investment under default contagion")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Model preset id.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Monte Carlo steps per year.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Factor grid nodes.
    #[arg(long, global = true)]
    ny: Option<usize>,
    /// Time steps over the horizon.
    #[arg(long, global = true)]
    nt: Option<usize>,
    /// Figure-style sweep (sweep command only).
    #[arg(long, global = true, value_parser = ["fig1", "fig2", "fig3"])]
    sweep: Option<String>,
    /// Disable the truncation clamp; bound violations become errors.
    #[arg(long, global = true)]
    no_clamp: bool,
    /// Dotted override, e.g. `grid.n_y=201` or `model.market.r=0.25`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve the PDE system and write fields, policies, bounds and diagnostics.
    Solve,
    /// Run the Monte Carlo checks and write mc_report.csv.
    Simulate {
        /// Directory of a previous `solve`; solves on the fly when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Write optimal fractions along a figure-style parameter axis.
    Sweep,
    /// Write closed-form and fixed-point reference values.
    Oracle,
    /// Check the model assumptions on the grid.
    Validate,
}

fn execution() -> Result<Execution, Failure> {
    let Ok(raw) = std::env::var("CONTAGION_THREADS") else {
        return Ok(Execution::Parallel);
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|t| *t >= 1)
        .ok_or_else(|| Failure::Validation(format!("CONTAGION_THREADS must be a positive integer, got `{raw}`")))?;
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(Execution::Parallel)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let command = match cli.command {
        Cmd::Solve => Command::Solve,
        Cmd::Simulate { .. } => Command::Simulate,
        Cmd::Sweep => Command::Sweep,
        Cmd::Oracle => Command::Oracle,
        Cmd::Validate => Command::Validate,
    };
    let overrides = Overrides {
        config: cli.config,
        preset: cli.preset,
        out: cli.out,
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        ny: cli.ny,
        nt: cli.nt,
        sweep: cli.sweep,
        no_clamp: cli.no_clamp,
        set: cli.set,
    };
    let cfg = RunConfig::build(command, &overrides).map_err(Failure::Validation)?;
    let exec = execution()?;
    match (&cli.command, command) {
        (Cmd::Simulate { from }, _) => commands::simulate(&cfg, from.as_deref(), exec),
        (_, Command::Solve) => commands::solve_cmd(&cfg, exec),
        (_, Command::Sweep) => commands::sweep(&cfg, exec),
        (_, Command::Oracle) => commands::oracle(&cfg),
        (_, Command::Validate) => commands::validate(&cfg),
        (_, Command::Simulate) => unreachable!("matched above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
