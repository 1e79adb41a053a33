//! `spdelab`: run simulations and the verification suite from a JSON
//! experiment config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use spdelab::verify::Suite;

/// Worker-thread count for the Monte Carlo fan-out. Results do not depend on it.
const THREADS_ENV: &str = "SPDELAB_THREADS";

#[derive(Parser)]
#[command(name = "spdelab", version, about = "Spectral Galerkin SPDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `mc.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories, one CSV per path.
    Simulate(Common),
    /// Monte Carlo transition semigroup on the configured observables.
    Semigroup(Common),
    /// Invariant-measure ensemble, moments and identity tests.
    Invariant(Common),
    /// Killed semigroup on the configured domain and its Feynman-Kac ladder.
    Dirichlet(Common),
    /// Property table of the Yosida approximants.
    Yosida(Common),
    /// Verification suite; exits nonzero if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fast")]
        suite: Suite,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    let load = |c: &Common| config::load(&c.config, c.seed, c.out.clone());
    let written = match &cli.command {
        Command::Simulate(c) => commands::cmd_simulate(&load(c)?)?,
        Command::Semigroup(c) => commands::cmd_semigroup(&load(c)?)?,
        Command::Invariant(c) => commands::cmd_invariant(&load(c)?)?,
        Command::Dirichlet(c) => commands::cmd_dirichlet(&load(c)?)?,
        Command::Yosida(c) => commands::cmd_yosida(&load(c)?)?,
        Command::Verify { common, suite } => {
            let exp = load(common)?;
            let (report, written) = commands::cmd_verify(&exp, *suite)?;
            for c in &report.checks {
                println!(
                    "{:<32} {:<30} {} ({} ms)",
                    c.check_id,
                    c.anchor,
                    if c.pass { "PASS" } else { "FAIL" },
                    c.runtime_ms
                );
                if !c.pass {
                    println!("    {}", c.detail);
                }
            }
            for p in &written {
                println!("wrote {}", p.display());
            }
            return Ok(report.all_pass);
        }
    };
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
