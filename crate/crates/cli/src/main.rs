//! `pglab`: build hard instances, run PG/NPG, verify structural properties and sweep.

mod commands;
mod output;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pglab_core::{Algorithm, Variant};

use spec::ExperimentSpec;

#[derive(Parser)]
#[command(
    name = "pglab",
    version,
    about = "Exact policy-gradient experiments on a hard tabular MDP"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the MDP, its layout and the resolved parameters.
    Build(Common),
    /// Run PG or NPG and write traces, crossings and a summary.
    Run(Common),
    /// Check the instance (and optionally a recorded run); exits 1 if any check fails.
    Verify(VerifyArgs),
    /// Run every point of the sweep axes and write an aggregate CSV.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Pg,
    Npg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Modified,
}

#[derive(Args)]
struct Common {
    /// Parameter file of key=value lines.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long)]
    max_iter: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum)]
    collapse: Option<OnOff>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Seed of the random policies used by verification.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory written by `pglab run`; its params.txt is used unless --params is given.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Number of random policies for the per-policy checks.
    #[arg(long, default_value_t = 100)]
    policies: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Concurrent runs; defaults to the number of logical cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    etas: Vec<f64>,
}

impl Common {
    fn spec(&self, fallback: Option<PathBuf>) -> Result<ExperimentSpec> {
        let mut spec = match self.params.clone().or(fallback) {
            Some(path) => ExperimentSpec::from_file(&path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(a) = self.algo {
            spec.algo = match a {
                AlgoArg::Pg => Algorithm::Pg,
                AlgoArg::Npg => Algorithm::Npg,
            };
        }
        if let Some(n) = self.max_iter {
            spec.max_iter = n;
        }
        if let Some(eta) = self.eta {
            spec.eta = Some(eta);
        }
        if let Some(c) = self.collapse {
            spec.collapse = matches!(c, OnOff::On);
        }
        if let Some(v) = self.variant {
            spec.variant = match v {
                VariantArg::Base => Variant::Base,
                VariantArg::Modified => Variant::Modified,
            };
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        Ok(spec)
    }

    fn out(&self) -> Result<PathBuf> {
        self.out.clone().context("--out is required")
    }
}

fn main_inner() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Build(c) => commands::cmd_build(&c.spec(None)?, &c.out()?)?,
        Command::Run(c) => commands::cmd_run(&c.spec(None)?, &c.out()?)?,
        Command::Verify(v) => {
            let params = v.run.as_ref().map(|d| d.join("params.txt")).filter(|p| p.exists());
            let spec = v.common.spec(params)?;
            let out = match (&v.common.out, &v.run) {
                (Some(o), _) => o.clone(),
                (None, Some(r)) => r.clone(),
                (None, None) => anyhow::bail!("--out or --run is required"),
            };
            if commands::cmd_verify(&spec, v.run.as_deref(), &out, v.policies)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sweep(s) => {
            let mut spec = s.common.spec(None)?;
            if !s.sizes.is_empty() {
                spec.sweep_sizes = s.sizes.clone();
            }
            if !s.gammas.is_empty() {
                spec.sweep_gammas = s.gammas.clone();
            }
            if !s.etas.is_empty() {
                spec.sweep_etas = s.etas.clone();
            }
            let jobs = s
                .jobs
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            commands::cmd_sweep(&spec, &s.common.out()?, jobs)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
