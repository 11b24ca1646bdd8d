//! `kinetra`: runs flows, transport solves and the verification suites from
//! a JSON configuration.
//!
//! Exit codes: 0 success, 1 a bound was violated, 2 bad configuration or
//! input, 3 a trajectory left the safety window.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinetra::Error;

use crate::config::{Format, RunConfig, Suite};

#[derive(Parser)]
#[command(
    name = "kinetra",
    version,
    about = "Characteristic flows and dispersion checks for kinetic transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate characteristics from the configured points.
    Flow(Common),
    /// Print the mixing time and injectivity time for a Lipschitz constant.
    Tau(Common),
    /// Run verification suites; exits 1 on any in-regime violation.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Option<Suite>,
    },
    /// Velocity moment of the transported indicator, with its Sobolev diagnostic.
    Moment(Common),
    /// Resolvent of the indicator of the initial support.
    Resolvent(Common),
    /// Equiintegrability moduli and the indicator-transport experiment.
    Equi(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Write one file per report here instead of to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> kinetra::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(f) = self.format {
            cfg.format = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("KINETRA_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
    {
        if n > 0 {
            // Fails only if a pool already exists; the default is then used.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn run(cli: Cli) -> kinetra::Result<bool> {
    match cli.command {
        Command::Flow(c) => commands::flow(&c.load()?),
        Command::Tau(c) => commands::tau(&c.load()?),
        Command::Verify { common, suite } => {
            let mut cfg = common.load()?;
            if let Some(s) = suite {
                cfg.suite = s;
            }
            commands::verify(&cfg)
        }
        Command::Moment(c) => commands::moment(&c.load()?),
        Command::Resolvent(c) => commands::resolvent(&c.load()?),
        Command::Equi(c) => commands::equi(&c.load()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("kinetra: {e}");
            match e {
                Error::Escape { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
