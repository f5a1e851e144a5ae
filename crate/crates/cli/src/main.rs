//! poolbed: run grouped-proposal design experiments from a TOML config.
//!
//! Exit codes: 0 success, 2 configuration or I/O problem, 3 numerical
//! failure (a diagnostic JSON lands in the output directory).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

mod config;
mod emit;
mod experiments;
mod manifest;

use config::{Experiment, RunConfig};
use manifest::RunManifest;
use poolbed_core::sequential::ErrorModelKind;

/// One experiment per process; results are written single-threaded while
/// forward solves may fan out over `--threads`.
#[derive(Debug, Parser)]
#[command(name = "poolbed", version, about = "Pooled-posterior sequential design experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment named in the config.
    Run(RunArgs),
    /// Run proposal diagnostics (conservative ESS and grouping) for the
    /// configured testbed, regardless of the config's experiment.
    Diagnose(RunArgs),
    /// Summarize a finished run directory.
    Report {
        /// Run directory holding manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forward-solve worker threads.
    #[arg(long, env = "POOLBED_THREADS", default_value_t = 1)]
    threads: usize,
}

/// Failures split by exit code: config and I/O problems (2) versus
/// numerical ones (3).
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Numerical(poolbed_core::CoreError),
}

impl From<poolbed_core::CoreError> for Failure {
    fn from(e: poolbed_core::CoreError) -> Self {
        Failure::Numerical(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "{msg}"),
            Failure::Io(msg) => write!(f, "{msg}"),
            Failure::Numerical(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => execute(args, None),
        Command::Diagnose(args) => execute(args, Some(Experiment::Diagnostics)),
        Command::Report { out } => report(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) | Err(Failure::Io(msg)) => {
            eprintln!("poolbed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("poolbed: numerical failure: {e}");
            ExitCode::from(3)
        }
    }
}

fn execute(args: RunArgs, force: Option<Experiment>) -> Result<(), Failure> {
    let raw = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("read {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&raw)?;
    if let Some(exp) = force {
        cfg.experiment = exp;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    if args.threads == 0 {
        return Err(Failure::Config("threads must be at least 1".into()));
    }
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.name()));
    fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("create {}: {e}", out.display())))?;

    let started = Instant::now();
    let mut manifest = RunManifest::begin(cfg.experiment.name(), seed, &raw, args.threads);
    manifest.write(&out)?;

    let ran = match cfg.experiment {
        Experiment::Parametric => {
            experiments::run_sequential(&cfg, ErrorModelKind::Parametric, &out, seed, args.threads)
        }
        Experiment::Structural => {
            experiments::run_sequential(&cfg, ErrorModelKind::Structural, &out, seed, args.threads)
        }
        Experiment::LinearToy => experiments::run_linear_toy(&cfg, &out, seed),
        Experiment::Diagnostics => experiments::run_diagnostics(&cfg, &out, seed, args.threads),
    };
    match ran {
        Ok(forward_evals) => {
            manifest.finish(&out, forward_evals, started)?;
            Ok(())
        }
        Err(Failure::Numerical(e)) => {
            // Leave a machine-readable trace next to the partial results.
            let diag = serde_json::json!({
                "error": e.to_string(),
                "experiment": cfg.experiment.name(),
                "seed": seed,
            });
            emit::write_json(&out.join("error.json"), &diag)?;
            Err(Failure::Numerical(e))
        }
        Err(other) => Err(other),
    }
}

fn report(out: &Path) -> Result<(), Failure> {
    let path = out.join("manifest.json");
    let raw = fs::read_to_string(&path)
        .map_err(|e| Failure::Config(format!("read {}: {e}", path.display())))?;
    let manifest: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Failure::Config(format!("parse {}: {e}", path.display())))?;
    println!("run directory : {}", out.display());
    for key in [
        "experiment",
        "seed",
        "status",
        "forward_evals",
        "wall_seconds",
        "version",
        "config_sha256",
    ] {
        if let Some(v) = manifest.get(key) {
            println!("{key:<14}: {v}");
        }
    }
    let mut files: Vec<(String, u64)> = fs::read_dir(out)
        .map_err(|e| Failure::Io(format!("list {}: {e}", out.display())))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let meta = entry.metadata().ok()?;
            meta.is_file()
                .then(|| (entry.file_name().to_string_lossy().into_owned(), meta.len()))
        })
        .collect();
    files.sort();
    println!("files:");
    for (name, bytes) in files {
        println!("  {name} ({bytes} bytes)");
    }
    Ok(())
}
