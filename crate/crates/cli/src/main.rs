//! `anisopt`: run state solves, coupled solves, optimization, regularization
//! sweeps and the inequality battery from a TOML configuration.
//!
//! Exit codes: 0 all invariants hold, 1 an invariant failed, 2 configuration
//! or validation error (nothing written), 3 runtime failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser};
use serde_json::json;

use anisopt_core::io::write_atomic;

use config::{content_hash, load_table, parse_config, Subcommand};

#[derive(Parser)]
#[command(name = "anisopt", version, about = "Anisotropic p-Laplacian control experiments")]
enum Cli {
    /// Solve the regularized state equation for a fixed control.
    SolveState(Common),
    /// Solve the state and then the Hammerstein equation driven by it.
    SolveHammerstein(Common),
    /// Minimize the tracking cost over a parameterized control.
    Optimize(Common),
    /// Solve along a schedule of regularization parameters.
    Sweep(Common),
    /// Sample the pointwise inequalities the analysis relies on.
    CheckInequalities(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mesh.n=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; takes precedence over `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn report(kind: &str, err: &anyhow::Error) {
    let record = json!({ "error": kind, "message": format!("{err:#}") });
    eprintln!("{record}");
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ANISOPT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow!("configuration error: ANISOPT_THREADS must be a positive integer (got '{v}')"))?;
        if n == 0 {
            return Err(anyhow!("configuration error: ANISOPT_THREADS must be a positive integer"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn execute(sub: Subcommand, common: &Common) -> std::result::Result<bool, Failure> {
    configure_threads().map_err(Failure::Config)?;
    let table = load_table(common.config.as_deref(), &common.overrides).map_err(Failure::Config)?;
    let cfg = parse_config(&table).map_err(Failure::Config)?;
    let resolved = cfg.validate(sub).map_err(|e| Failure::Config(anyhow!("{e}")))?;
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    if out_dir.exists() && !out_dir.is_dir() {
        return Err(Failure::Config(anyhow!(
            "validation error: output path {} is not a directory",
            out_dir.display()
        )));
    }
    let input_hash = content_hash(&table).map_err(Failure::Config)?;

    let start = Instant::now();
    let outcome = commands::run(sub, &cfg, &resolved).map_err(Failure::Runtime)?;
    let wall_time = start.elapsed().as_secs_f64();

    let passed = outcome.invariants.values().all(|&v| v);
    let mut files: Vec<String> = outcome.files.iter().map(|(n, _)| n.clone()).collect();
    files.push("manifest.json".into());
    let manifest = json!({
        "subcommand": sub.id(),
        "config": serde_json::to_value(&table).map_err(|e| Failure::Runtime(e.into()))?,
        "input_hash": input_hash,
        "seed": cfg.seed,
        "wall_time_secs": wall_time,
        "condition_value": outcome.condition_value,
        "reports": outcome.reports,
        "invariants": outcome.invariants,
        "invariants_passed": passed,
        "files": files,
    });
    let manifest = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.into()))? + "\n";
    write_outputs(&out_dir, &outcome.files, manifest.as_bytes()).map_err(Failure::Runtime)?;
    Ok(passed)
}

fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)], manifest: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (name, body) in files {
        write_atomic(&dir.join(name), body).with_context(|| format!("cannot write {name}"))?;
    }
    write_atomic(&dir.join("manifest.json"), manifest).context("cannot write manifest.json")?;
    Ok(())
}

fn main() -> ExitCode {
    let (sub, common) = match Cli::parse() {
        Cli::SolveState(c) => (Subcommand::SolveState, c),
        Cli::SolveHammerstein(c) => (Subcommand::SolveHammerstein, c),
        Cli::Optimize(c) => (Subcommand::Optimize, c),
        Cli::Sweep(c) => (Subcommand::Sweep, c),
        Cli::CheckInequalities(c) => (Subcommand::CheckInequalities, c),
    };
    match execute(sub, &common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "error": "invariant", "message": "one or more invariants failed; see manifest.json" }));
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            report("config", &e);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            report("runtime", &e);
            ExitCode::from(3)
        }
    }
}
