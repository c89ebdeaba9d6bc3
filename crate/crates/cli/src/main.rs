//! Command-line interface binding simulation, rule fitting, evaluation,
//! and diagnostics, with deterministic config-driven runs.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use commands::OutputTracker;

#[derive(Parser)]
#[command(
    name = "omar",
    about = "Estimate, evaluate, and diagnose minimal allocation rules for clustered data with within-cluster spillovers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Generate a synthetic clustered dataset.
    Simulate,
    /// Fit the direct (risk-minimizing kernel) rule.
    FitDirect,
    /// Fit the indirect (outcome-model grid-search) rule.
    FitIndirect,
    /// Score fitted rules on a test dataset.
    Evaluate,
    /// Run nuisance-model diagnostics.
    Diagnose,
    /// Reproduce the block-aggregation bias demonstration.
    BiasDemo,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::FitDirect => "fit-direct",
            Command::FitIndirect => "fit-indirect",
            Command::Evaluate => "evaluate",
            Command::Diagnose => "diagnose",
            Command::BiasDemo => "bias-demo",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed_override: Option<u64>,
    outputs: Vec<String>,
    config: serde_json::Value,
}

#[derive(Serialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Serialize)]
struct ErrorDetail {
    kind: String,
    message: String,
}

fn error_kind(err: &omar_core::Error) -> &'static str {
    use omar_core::Error::*;
    match err {
        InvalidData(_) => "invalid-data",
        InvalidConfig(_) => "invalid-config",
        FitFailed(_) => "fit-failed",
        Singular { .. } => "singular",
        NonConvergence { .. } => "non-convergence",
        NonFinite(_) => "non-finite",
    }
}

fn run(cli: &Cli) -> omar_core::Result<(serde_json::Value, Vec<PathBuf>)> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| omar_core::Error::InvalidConfig("--config PATH is required".into()))?;
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| omar_core::Error::InvalidConfig(format!("{}: {e}", config_path.display())))?;

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| omar_core::Error::InvalidConfig(format!("{}: {e}", cli.out.display())))?;

    let mut tracker = OutputTracker::default();
    let parse = |e: serde_json::Error| {
        omar_core::Error::InvalidConfig(format!("{}: {e}", config_path.display()))
    };
    let result = match cli.command {
        Command::Simulate => {
            let cfg: config::SimulateConfig = serde_json::from_str(&raw).map_err(parse)?;
            commands::run_simulate(&cfg, cli.seed, &cli.out, &mut tracker)
                .map(|()| serde_json::to_value(&cfg).expect("config serializes"))
        }
        Command::FitDirect => {
            let cfg: config::FitDirectConfig = serde_json::from_str(&raw).map_err(parse)?;
            commands::run_fit_direct(&cfg, cli.seed, &cli.out, &mut tracker)
                .map(|()| serde_json::to_value(&cfg).expect("config serializes"))
        }
        Command::FitIndirect => {
            let cfg: config::FitIndirectConfig = serde_json::from_str(&raw).map_err(parse)?;
            commands::run_fit_indirect(&cfg, cli.seed, &cli.out, &mut tracker)
                .map(|()| serde_json::to_value(&cfg).expect("config serializes"))
        }
        Command::Evaluate => {
            let cfg: config::EvaluateConfig = serde_json::from_str(&raw).map_err(parse)?;
            commands::run_evaluate(&cfg, &cli.out, &mut tracker)
                .map(|()| serde_json::to_value(&cfg).expect("config serializes"))
        }
        Command::Diagnose => {
            let cfg: config::DiagnoseConfig = serde_json::from_str(&raw).map_err(parse)?;
            commands::run_diagnose(&cfg, cli.seed, &cli.out, &mut tracker)
                .map(|()| serde_json::to_value(&cfg).expect("config serializes"))
        }
        Command::BiasDemo => {
            let cfg: config::BiasDemoCliConfig = serde_json::from_str(&raw).map_err(parse)?;
            commands::run_bias_demo(&cfg, &cli.out, &mut tracker)
                .map(|()| serde_json::to_value(&cfg).expect("config serializes"))
        }
    };

    match result {
        Ok(canonical) => Ok((canonical, tracker.outputs().to_vec())),
        Err(err) => {
            tracker.remove_all();
            Err(err)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("failed to size thread pool: {e}");
        }
    }

    match run(&cli) {
        Ok((canonical_config, outputs)) => {
            let canonical_str =
                serde_json::to_string(&canonical_config).expect("config serializes");
            let mut hasher = Sha256::new();
            hasher.update(canonical_str.as_bytes());
            let manifest = Manifest {
                command: cli.command.name(),
                version: env!("CARGO_PKG_VERSION"),
                config_sha256: format!("{:x}", hasher.finalize()),
                seed_override: cli.seed,
                outputs: outputs
                    .iter()
                    .map(|p| p.strip_prefix(&cli.out).unwrap_or(p).to_string_lossy().into_owned())
                    .collect(),
                config: canonical_config,
            };
            let path = cli.out.join(format!("{}-manifest.json", cli.command.name()));
            match serde_json::to_string_pretty(&manifest)
                .map_err(|e| e.to_string())
                .and_then(|body| std::fs::write(&path, body).map_err(|e| e.to_string()))
            {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!(
                        "{}",
                        serde_json::to_string(&ErrorBody {
                            error: ErrorDetail { kind: "io".into(), message: e }
                        })
                        .expect("error body serializes")
                    );
                    ExitCode::FAILURE
                }
            }
        }
        Err(err) => {
            let body = ErrorBody {
                error: ErrorDetail { kind: error_kind(&err).into(), message: err.to_string() },
            };
            eprintln!("{}", serde_json::to_string(&body).expect("error body serializes"));
            ExitCode::FAILURE
        }
    }
}
