//! `mvdiv` command-line front end.
//!
//! Exit codes: 0 success, 1 failed verification (or a numerical defect),
//! 2 configuration error, 3 parameters outside both closed-form regimes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod manifest;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Loaded, Overrides};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mvdiv", version, about = "Equilibrium mean-variance dividend strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<u64>,
    /// Overrides the time step.
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Scale the barrier constant C1 by 1.01.
    C1,
}

#[derive(Subcommand)]
enum Command {
    /// Classify the regime and print the closed-form equilibrium.
    Solve(Common),
    /// Barrier level over a γ and/or d̄ grid, as CSV.
    Sweep(Common),
    /// Tabulate G, H and V of a strategy on an x grid, as CSV.
    Eval(Common),
    /// Monte Carlo moments of the discounted dividends.
    Simulate(Common),
    /// Run the closed-form, oracle, Monte Carlo and equilibrium checks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Unresolved(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Numerical(_) => 1,
            Failure::Config(_) => 2,
            Failure::Unresolved(_) => 3,
        }
    }
}

pub struct Ctx {
    pub loaded: Loaded,
    pub over: Overrides,
    pub out: Option<PathBuf>,
    pub fault: Option<f64>,
}

impl Ctx {
    pub fn manifest(&self, command: &str) -> RunManifest {
        let mut m =
            RunManifest::new(command, self.loaded.config.raw(), &self.loaded.bytes, self.loaded.config.seed(&self.over));
        if let Some(n) = self.over.paths {
            m.overrides.push(format!("paths={n}"));
        }
        if let Some(dt) = self.over.dt {
            m.overrides.push(format!("dt={dt}"));
        }
        if let Some(rel) = self.fault {
            m.overrides.push(format!("fault=c1*{}", 1.0 + rel));
        }
        m
    }
}

fn threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("MVDIV_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Config(format!("MVDIV_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<bool, Failure> {
    threads()?;
    let (common, fault) = match cli.command {
        Command::Solve(ref c) | Command::Sweep(ref c) | Command::Eval(ref c) | Command::Simulate(ref c) => (c, None),
        Command::Verify { ref common, inject_fault } => (common, inject_fault.map(|Fault::C1| 0.01)),
    };
    if let Some(dt) = common.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Failure::Config(format!("--dt must be > 0, got {dt}")));
        }
    }
    if common.paths == Some(0) {
        return Err(Failure::Config("--paths must be ≥ 1".into()));
    }
    let ctx = Ctx {
        loaded: config::load(&common.config)?,
        over: Overrides { seed: common.seed, paths: common.paths, dt: common.dt },
        out: common.out.clone(),
        fault,
    };
    match cli.command {
        Command::Solve(_) => commands::cmd_solve(&ctx).map(|_| true),
        Command::Sweep(_) => commands::cmd_sweep(&ctx).map(|_| true),
        Command::Eval(_) => commands::cmd_eval(&ctx).map(|_| true),
        Command::Simulate(_) => commands::cmd_simulate(&ctx).map(|_| true),
        Command::Verify { .. } => verify::cmd_verify(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            let (Failure::Config(m) | Failure::Unresolved(m) | Failure::Numerical(m)) = &f;
            let kind = match f {
                Failure::Config(_) => "config error",
                Failure::Unresolved(_) => "unresolved regime",
                Failure::Numerical(_) => "numerical failure",
            };
            eprintln!("mvdiv: {kind}: {m}");
            ExitCode::from(f.code())
        }
    }
}
