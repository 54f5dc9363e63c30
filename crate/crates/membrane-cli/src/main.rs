//! Experiment harness for the spherical membrane simulator: subcommands,
//! structured configs, CSV/JSON outputs, binary checkpoints, deterministic
//! reproduction.
//!
//! Exit codes: 0 success, 2 configuration/validation error (manifest only),
//! 3 numerical-failure termination (partial outputs preserved).

mod checkpoint;
mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{Failure, Outcome};
use config::Config;
use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "membrane",
    version,
    about = "Spectral simulator for the surface-tension/pressure membrane on the sphere"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (key = value with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration entry, e.g. --set time.t_end=5.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (default: the run.out config entry).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Random seed (overrides run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Resume a simulate run from a binary checkpoint.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Nonlinear time integration with diagnostics and checkpoints.
    Simulate,
    /// Modewise evolution of the linearized normal component.
    Linear,
    /// Triple splitting (Y, c, v) of linearized Cauchy data.
    Split,
    /// Radial breather ODE trace and period measurement.
    Breather,
    /// Spectrum of the linearized operator at the identity.
    Spectrum,
    /// Measure the dyadic smoothing-operator constants.
    SmoothingAxioms,
    /// Smoothed Newton iteration for the nonlinear Cauchy problem.
    NashMoser,
    /// Lifespan scan over initial-data amplitudes.
    LifespanScan,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Linear => "linear",
            Command::Split => "split",
            Command::Breather => "breather",
            Command::Spectrum => "spectrum",
            Command::SmoothingAxioms => "smoothing-axioms",
            Command::NashMoser => "nash-moser",
            Command::LifespanScan => "lifespan-scan",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();

    // Resolve the configuration; a parse failure still produces a manifest
    // in the best-effort output directory.
    let (cfg, cfg_error) = load_config(&cli);
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(cfg.get_string("run.out")));
    if let Err(e) = fs::create_dir_all(&out_dir) {
        eprintln!(
            "error: cannot create output directory {}: {e}",
            out_dir.display()
        );
        std::process::exit(1);
    }
    let seed = cli
        .seed
        .unwrap_or_else(|| cfg.get_u64("run.seed").unwrap_or(42));

    let result: Result<Outcome, Failure> = match cfg_error {
        Some(msg) => Err(Failure::Validation(msg)),
        None => match cli.command {
            Command::Simulate => {
                commands::run_simulate(&cfg, &out_dir, seed, cli.resume.as_deref())
            }
            Command::Linear => commands::run_linear(&cfg, &out_dir, seed),
            Command::Split => commands::run_split(&cfg, &out_dir, seed),
            Command::Breather => commands::run_breather(&cfg, &out_dir, seed),
            Command::Spectrum => commands::run_spectrum(&cfg, &out_dir, seed),
            Command::SmoothingAxioms => commands::run_smoothing(&cfg, &out_dir, seed),
            Command::NashMoser => commands::run_nashmoser(&cfg, &out_dir, seed),
            Command::LifespanScan => commands::run_lifespan(&cfg, &out_dir, seed),
        },
    };

    let wall = started.elapsed().as_secs_f64();
    let (termination, grid, extra, outputs, error, code) = match result {
        Ok(outcome) => (
            outcome.termination,
            outcome.grid,
            outcome.extra,
            outcome.outputs,
            None,
            0,
        ),
        Err(failure) => (
            "failed".to_string(),
            None,
            BTreeMap::new(),
            existing_outputs(&out_dir),
            Some(failure.message().to_string()),
            failure.exit_code(),
        ),
    };

    let manifest = Manifest {
        artifact: "membrane",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().to_string(),
        seed,
        grid,
        config: cfg.resolved(),
        wall_clock_seconds: wall,
        termination,
        outputs: Manifest::digest_outputs(&out_dir, &outputs),
        extra,
        error: error.clone(),
    };
    if let Err(e) = manifest.write(&out_dir) {
        eprintln!("error: cannot write manifest: {e:#}");
        std::process::exit(1);
    }

    if let Some(msg) = error {
        eprintln!("error: {msg}");
    }
    std::process::exit(code);
}

fn load_config(cli: &Cli) -> (Config, Option<String>) {
    let mut cfg = match &cli.config {
        None => Config::default(),
        Some(path) => match fs::read_to_string(path) {
            Ok(text) => match Config::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    return (
                        Config::default(),
                        Some(format!("config parse error: {e:#}")),
                    )
                }
            },
            Err(e) => {
                return (
                    Config::default(),
                    Some(format!("cannot read config {}: {e}", path.display())),
                )
            }
        },
    };
    for spec in &cli.overrides {
        if let Err(e) = cfg.set(spec) {
            return (cfg, Some(format!("bad override {spec:?}: {e:#}")));
        }
    }
    (cfg, None)
}

/// Partial outputs present in the directory after a failure, so the
/// manifest still records what exists.
fn existing_outputs(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_file() && path.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}
