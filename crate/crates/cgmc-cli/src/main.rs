//! Command-line front end for the lattice Monte Carlo experiments.
//!
//! `run` executes a config (from a file or an embedded preset) and writes
//! deterministic artifacts; `verify` runs the exact-kernel invariants
//! matrix; `report` re-checks a finished run's operation counters.
//! `CGMC_WORKERS` caps the worker-pool size of parallel builds.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cgmc_cli::config::{parse_config, ExperimentConfig};
use cgmc_cli::presets;
use cgmc_cli::runner::{report_run, run_experiment};
use cgmc_cli::verify::run_verify;

#[derive(Parser)]
#[command(
    name = "cgmc",
    version,
    about = "Lattice-gas Monte Carlo with two-level coarse-grained proposals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSV, snapshots, stats and a
    /// manifest into the output directory.
    Run {
        /// Config file (TOML).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Embedded preset name.
        #[arg(long)]
        preset: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (created if missing).
        #[arg(long, default_value = "cgmc-out")]
        out: PathBuf,
    },
    /// Run the exact-kernel invariants matrix; exits 0 iff every check
    /// passes.
    Verify {
        /// Optional config to validate before the matrix runs.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Optional preset to validate before the matrix runs.
        #[arg(long)]
        preset: Option<String>,
        /// If given, the spectral-gap table is written here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check the operation-count identities of a finished run.
    Report {
        /// The run's output directory (reads stats.toml).
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_workers() {
    let Ok(value) = std::env::var("CGMC_WORKERS") else {
        return;
    };
    match value.parse::<usize>() {
        Ok(workers) if workers >= 1 => {
            #[cfg(feature = "parallel")]
            {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
            }
            #[cfg(not(feature = "parallel"))]
            eprintln!("CGMC_WORKERS={workers} ignored: built without the parallel feature");
        }
        _ => eprintln!("CGMC_WORKERS must be a positive integer, got {value:?}; ignoring"),
    }
}

/// Loads and validates a config from `--config` or `--preset`.
fn load_config(
    config: Option<&PathBuf>,
    preset: Option<&str>,
    required: bool,
) -> Result<Option<ExperimentConfig>, String> {
    let text = match (config, preset) {
        (Some(path), None) => fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?,
        (None, Some(name)) => presets::preset(name)
            .ok_or_else(|| format!("unknown preset {name:?}; available: {}", presets::names()))?
            .to_string(),
        (None, None) => {
            if required {
                return Err(format!(
                    "give --config FILE or --preset NAME (presets: {})",
                    presets::names()
                ));
            }
            return Ok(None);
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    parse_config(&text).map(Some).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, preset, seed, out } => {
            let mut cfg = match load_config(config.as_ref(), preset.as_deref(), true) {
                Ok(cfg) => cfg.expect("required"),
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(2);
                }
            };
            if let Some(seed) = seed {
                cfg.sampler.seed = seed;
            }
            match run_experiment(&cfg, &out) {
                Ok(summary) => {
                    print!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Verify { config, preset, out } => {
            if let Err(msg) = load_config(config.as_ref(), preset.as_deref(), false) {
                eprintln!("error: {msg}");
                return ExitCode::from(2);
            }
            let summary = match run_verify() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            for line in &summary.lines {
                println!("{line}");
            }
            if let Some(dir) = out {
                if let Err(e) = fs::create_dir_all(&dir) {
                    eprintln!("error: {}: {e}", dir.display());
                    return ExitCode::FAILURE;
                }
                let path = dir.join("gap_report.csv");
                if let Err(e) = fs::write(&path, &summary.gap_csv) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::FAILURE;
                }
                println!("gap table written to {}", path.display());
            }
            if summary.passed() {
                println!("all {} instances pass", summary.lines.len());
                ExitCode::SUCCESS
            } else {
                for failure in &summary.failures {
                    eprintln!("FAIL {failure}");
                }
                ExitCode::FAILURE
            }
        }
        Command::Report { out } => match report_run(&out) {
            Ok((text, ok)) => {
                print!("{text}");
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
