mod commands;
mod config;
mod error;
mod provenance;

use clap::{Parser, Subcommand};
use commands::RunMode;
use config::RunConfig;
use error::CliResult;
use std::path::PathBuf;
use std::process::ExitCode;

/// Quantization-error compensation workflows on synthetic models.
#[derive(Parser)]
#[command(name = "qcomp", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `model.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and serialize the synthetic model.
    Fixture {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure spectra, sensitivities and timing into an artifact.
    Calibrate {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a calibration artifact into a rank plan.
    Allocate {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode with a plan and write the latency profile.
    Run {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = RunMode::Pipelined)]
        mode: RunMode,
        /// Profile path; the run summary goes next to it as `.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate budget-preserving neighbors of a plan.
    Perturb {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Human-readable summary of an artifact, plan and profile.
    Report {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
    }
    match cli.command {
        Command::Fixture { out } => commands::fixture(&cfg, out).map(drop),
        Command::Calibrate { fixture, out } => commands::calibrate(&cfg, &fixture, out).map(drop),
        Command::Allocate { artifact, out } => commands::allocate_cmd(&cfg, &artifact, out).map(drop),
        Command::Run {
            fixture,
            plan,
            steps,
            mode,
            out,
        } => commands::run(&cfg, &fixture, &plan, steps, mode, out).map(drop),
        Command::Perturb {
            fixture,
            plan,
            trials,
            out,
        } => commands::perturb(&cfg, &fixture, &plan, trials, out).map(drop),
        Command::Report {
            artifact,
            plan,
            profile,
            out,
        } => commands::report_cmd(&cfg, &artifact, plan.as_deref(), profile.as_deref(), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("QCOMP_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
