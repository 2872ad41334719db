mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::commands::Report;
use crate::config::RunConfig;

const THREADS_VAR: &str = "PERIODIC_HARRIS_THREADS";

#[derive(Parser)]
#[command(name = "periodic-harris", version, about = "Simulation and verification runs for periodically driven HH diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set sim.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate one path and export it.
    Simulate,
    /// Bracket rank check at the start point.
    Hoermander,
    /// Synthesize and integrate the steering controls.
    Control,
    /// Monte Carlo check of the drift inequality.
    Lyapunov,
    /// Interspike-interval convergence diagnostics.
    Isi,
    /// Compare toy-model moments with their closed form.
    ToyValidate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Hoermander => "hoermander",
            Command::Control => "control",
            Command::Lyapunov => "lyapunov",
            Command::Isi => "isi",
            Command::ToyValidate => "toy-validate",
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    passed: bool,
    config: &'a RunConfig,
    result: &'a serde_json::Value,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

/// Configuration problems surfacing from the library count as config errors.
fn classify(e: anyhow::Error) -> Failure {
    let is_config = e.chain().any(|c| matches!(c.downcast_ref::<periodic_harris::Error>(), Some(periodic_harris::Error::Config(_))));
    if is_config {
        Failure::Config(e)
    } else {
        Failure::Runtime(e)
    }
}

fn threads(cfg: &RunConfig) -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v.trim().parse().with_context(|| format!("{THREADS_VAR} must be a nonnegative integer, got `{v}`")),
        Err(_) => Ok(cfg.sim.threads),
    }
}

fn run_dir(cfg: &RunConfig, hash: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    Path::new(&cfg.output.dir).join(format!("{stamp}-{hash}"))
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).map_err(Failure::Config)?;
    let spec = cfg.model_spec().map_err(Failure::Config)?;
    let n = threads(&cfg).map_err(Failure::Config)?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))?;

    let hash = cfg.hash();
    let dir = run_dir(&cfg, &hash);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let command = cli.command;
    let report: Report = match command {
        Command::Simulate => commands::simulate(&cfg, &spec, &dir),
        Command::Hoermander => commands::hoermander(&cfg, &spec, &dir),
        Command::Control => commands::control(&cfg, &spec, &dir),
        Command::Lyapunov => commands::lyapunov(&cfg, &spec, &dir),
        Command::Isi => commands::isi(&cfg, &spec, &dir),
        Command::ToyValidate => commands::toy_validate(&cfg, &spec, &dir),
    }
    .map_err(|e| {
        // Only removes the directory when nothing was written to it.
        let _ = std::fs::remove_dir(&dir);
        classify(e)
    })?;

    let envelope = Envelope {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: &hash,
        seed: cfg.sim.seed,
        passed: report.passed,
        config: &cfg,
        result: &report.result,
    };
    let json = serde_json::to_string_pretty(&envelope).map_err(|e| Failure::Runtime(e.into()))?;
    let out = dir.join(format!("{}.json", command.name()));
    std::fs::write(&out, json + "\n").map_err(|e| Failure::Runtime(e.into()))?;
    print!("{} on {} model\n{}", command.name(), spec.name(), report.summary);
    println!("{}: {}", if report.passed { "ok" } else { "FAILED" }, out.display());
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
