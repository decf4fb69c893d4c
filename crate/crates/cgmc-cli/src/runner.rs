//! Executes a built experiment and writes its artifacts: the canonical
//! config, the observable CSV, configuration snapshots, the counter
//! record, and a manifest binding them to the config hash and seed. All
//! files are written atomically (temp file + rename) and contain nothing
//! nondeterministic, so rerunning a config/seed pair reproduces every
//! artifact byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cgmc::lattice::snapshot_string;
use cgmc::observables::{
    hysteresis_sweep_with_stats, pattern_stats, Phase, SweepPlan, CURVE_CSV_HEADER,
};
use cgmc::samplers::{
    drive, drive_coarse, prepare_coarse_chain, prepare_fine_chain, AcceptanceStats, DriveSettings,
    Ensemble, Method, ObservableRow, Strategy,
};

use crate::config::{canonical_toml, BuiltExperiment, ConfigError, ExperimentConfig, RunMode};

pub type RunResult<T> = std::result::Result<T, ConfigError>;

fn io_err(path: &Path, e: std::io::Error) -> ConfigError {
    ConfigError { key: String::new(), message: format!("{}: {e}", path.display()) }
}

/// Writes via a sibling temp file and an atomic rename, so a crash never
/// leaves a half-written artifact under the final name.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> RunResult<PathBuf> {
    let tmp = dir.join(format!("{name}.tmp"));
    let target = dir.join(name);
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(contents.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    file.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, &target).map_err(|e| io_err(&target, e))?;
    Ok(target)
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// Per-run counter record, written as `stats.toml`. Carries the scan-size
/// constants next to the counters so the `report` subcommand can check the
/// operation-count identities without rebuilding the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsRecord {
    pub method: String,
    pub strategy: String,
    pub ensemble: String,
    /// Sites per coarse cell (1 when the run has no coarse level).
    pub q_volume: u64,
    /// Neighbor visits per fine evaluation of the long-range (or single)
    /// potential.
    pub trip_long: u64,
    /// Neighbor visits per fine evaluation of the short-range potential.
    pub trip_short: u64,
    /// Cell visits per coarse-level evaluation (0 without a coarse level).
    pub trip_coarse: u64,
    /// Whether the corrections strategy truncated its fine test.
    pub truncated_corrections: bool,
    pub n_coarse_proposed: u64,
    pub m_coarse_accepted: u64,
    pub n_fine_proposed: u64,
    pub n_fine_accepted: u64,
    pub ops_long: u64,
    pub ops_short: u64,
    pub ops_coarse: u64,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Mh => "mh",
        Method::Cgmc => "cgmc",
        Method::TwoLevel => "two_level",
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Corrections => "corrections",
        Strategy::Splitting => "splitting",
        Strategy::ApproximateCg => "approximate_cg",
    }
}

impl StatsRecord {
    fn new(config: &ExperimentConfig, built: &BuiltExperiment, stats: &AcceptanceStats) -> Self {
        let coupling = built.h.coupling();
        StatsRecord {
            method: method_name(built.sampler.method).to_string(),
            strategy: strategy_name(built.sampler.strategy).to_string(),
            ensemble: if built.sampler.ensemble == Ensemble::Canonical {
                "canonical".to_string()
            } else {
                "microcanonical".to_string()
            },
            q_volume: built.cg.as_ref().map_or(1, |cg| cg.cell_volume() as u64),
            trip_long: coupling.long_trips(),
            trip_short: coupling.short_trips(),
            trip_coarse: built.hbar.as_ref().map_or(0, |hb| hb.scan_trips()),
            truncated_corrections: config.potential.l_c.is_some(),
            n_coarse_proposed: stats.n_coarse_proposed,
            m_coarse_accepted: stats.m_coarse_accepted,
            n_fine_proposed: stats.n_fine_proposed,
            n_fine_accepted: stats.n_fine_accepted,
            ops_long: stats.ops_long,
            ops_short: stats.ops_short,
            ops_coarse: stats.ops_coarse,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_sha256: String,
    seed: u64,
    versions: BTreeMap<String, String>,
    artifacts: Vec<String>,
}

/// One check of the operation report: a label, the predicted and measured
/// values, and whether they agree exactly.
struct OpsCheck {
    label: String,
    predicted: u64,
    measured: u64,
}

impl OpsCheck {
    fn ok(&self) -> bool {
        self.predicted == self.measured
    }
}

/// Renders the operation-count report and verdict for a finished run.
///
/// `n` is the number of first-stage proposals, `m` the number that passed
/// the first stage (so also the number of fine tests). For spin-flip runs
/// the per-proposal scan sizes are constants and the totals must match
/// the predicted products exactly; exchange runs skip the evaluation on
/// identity proposals, so their totals are reported without a closed form.
pub fn report_ops(record: &StatsRecord) -> (String, bool) {
    let n = record.n_coarse_proposed;
    let m = record.m_coarse_accepted;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "operation report: method = {}, strategy = {}, ensemble = {}",
        record.method, record.strategy, record.ensemble
    );
    let _ = writeln!(out, "  n (first-stage proposals)  = {n}");
    let _ = writeln!(out, "  m (first-stage acceptances) = {m}");
    let _ = writeln!(
        out,
        "  scan sizes: long = {}, short = {}, coarse = {} (Q = {})",
        record.trip_long, record.trip_short, record.trip_coarse, record.q_volume
    );

    let mut checks = vec![OpsCheck {
        label: "m <= n".into(),
        predicted: u64::from(m <= n),
        measured: 1,
    }];
    // The fine stage runs once per first-stage acceptance.
    checks.push(OpsCheck {
        label: "fine proposals = m".into(),
        predicted: m,
        measured: record.n_fine_proposed,
    });

    let flip = record.ensemble == "canonical";
    match (record.method.as_str(), record.strategy.as_str(), flip) {
        ("mh", _, true) => {
            checks.push(OpsCheck {
                label: format!("long visits = n x {}", record.trip_long),
                predicted: n * record.trip_long,
                measured: record.ops_long,
            });
            checks.push(OpsCheck {
                label: format!("short visits = n x {}", record.trip_short),
                predicted: n * record.trip_short,
                measured: record.ops_short,
            });
            checks.push(OpsCheck {
                label: "coarse visits = 0".into(),
                predicted: 0,
                measured: record.ops_coarse,
            });
        }
        ("cgmc", _, _) => {
            checks.push(OpsCheck {
                label: format!("coarse visits = n x {}", record.trip_coarse),
                predicted: n * record.trip_coarse,
                measured: record.ops_coarse,
            });
            checks.push(OpsCheck {
                label: "fine visits = 0".into(),
                predicted: 0,
                measured: record.ops_long + record.ops_short,
            });
        }
        ("two_level", strategy, true) => {
            checks.push(OpsCheck {
                label: format!("coarse visits = n x {}", record.trip_coarse),
                predicted: n * record.trip_coarse,
                measured: record.ops_coarse,
            });
            match strategy {
                "splitting" | "approximate_cg" => {
                    checks.push(OpsCheck {
                        label: format!("short visits = m x {}", record.trip_short),
                        predicted: m * record.trip_short,
                        measured: record.ops_short,
                    });
                    checks.push(OpsCheck {
                        label: "long visits = 0".into(),
                        predicted: 0,
                        measured: record.ops_long,
                    });
                }
                "corrections" if !record.truncated_corrections => {
                    checks.push(OpsCheck {
                        label: format!("long visits = m x {}", record.trip_long),
                        predicted: m * record.trip_long,
                        measured: record.ops_long,
                    });
                    checks.push(OpsCheck {
                        label: format!("short visits = m x {}", record.trip_short),
                        predicted: m * record.trip_short,
                        measured: record.ops_short,
                    });
                }
                _ => {
                    // Truncated corrections: the per-test pair count is a
                    // property of the cutoff; require it to be a constant
                    // integer.
                    checks.push(OpsCheck {
                        label: "truncated long visits divisible by m".into(),
                        predicted: u64::from(m == 0 || record.ops_long % m == 0),
                        measured: 1,
                    });
                }
            }
        }
        _ => {
            let _ = writeln!(
                out,
                "  exchange dynamics skip the evaluation on identity proposals; \
                 totals reported without a closed form:"
            );
            let _ = writeln!(
                out,
                "    long visits = {}, short visits = {}, coarse visits = {}",
                record.ops_long, record.ops_short, record.ops_coarse
            );
        }
    }

    let mut all_ok = true;
    for check in &checks {
        let verdict = if check.ok() { "match" } else { "MISMATCH" };
        all_ok &= check.ok();
        let _ = writeln!(
            out,
            "  {:<40} predicted {:>14} measured {:>14}  {verdict}",
            check.label, check.predicted, check.measured
        );
    }
    let total = record.ops_long + record.ops_short + record.ops_coarse;
    let _ = writeln!(out, "  total neighbor visits = {total}");
    let _ = writeln!(out, "verdict: {}", if all_ok { "exact" } else { "MISMATCH" });
    (out, all_ok)
}

fn rows_csv(rows: &[ObservableRow]) -> String {
    let mut text = String::from(ObservableRow::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    text
}

fn snapshot_name(step: u64, dim: usize) -> String {
    let ext = if dim == 2 { "pgm" } else { "txt" };
    format!("snapshot_{step:010}.{ext}")
}

/// Drives a single chain for the full budget, pausing at snapshot
/// boundaries to dump the configuration. Returns the rows, the final
/// counters, and the snapshot file names with their contents.
fn run_drive(
    built: &BuiltExperiment,
    snapshot_stride: u64,
) -> RunResult<(Vec<ObservableRow>, AcceptanceStats, Vec<(String, String)>)> {
    let cfg = &built.sampler;
    let dim = built.geom.dim();

    if cfg.method == Method::Cgmc {
        // The coarse-only chain has no microscopic configuration to
        // snapshot; it runs in one stretch.
        let hbar = built.hbar.as_ref().expect("built with a coarse level");
        let cg = built.cg.as_ref().expect("built with a coarse level");
        let mut state = prepare_coarse_chain(cfg, cg)?;
        let rows = drive_coarse(&mut state, hbar, &cfg.drive_settings())?;
        return Ok((rows, state.stats, Vec::new()));
    }

    let mut state = prepare_fine_chain(cfg, &built.geom, built.cg.as_ref())?;
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut done = 0u64;
    while done < cfg.iterations {
        let remaining = cfg.iterations - done;
        let segment = if snapshot_stride > 0 { snapshot_stride.min(remaining) } else { remaining };
        let settings = DriveSettings {
            iterations: segment,
            burn_in: if done == 0 { cfg.burn_in } else { 0 },
            step_offset: done,
            ..cfg.drive_settings()
        };
        rows.extend(drive(&mut state, &built.h, built.hbar.as_ref(), &settings)?);
        done += segment;
        if snapshot_stride > 0 && done < cfg.iterations {
            snapshots.push((snapshot_name(done, dim), snapshot_string(&built.geom, state.sigma())));
        }
    }
    let ext = if dim == 2 { "pgm" } else { "txt" };
    snapshots.push((format!("snapshot_final.{ext}"), snapshot_string(&built.geom, state.sigma())));

    // 2D exchange runs study domain patterns; record the feature
    // statistics of both phases alongside the raw snapshot.
    if dim == 2 && cfg.ensemble == Ensemble::Microcanonical {
        let mut csv = String::from("phase,feature_count,mean_diameter,diameter_std,ci_lo,ci_hi\n");
        for (label, phase) in [("occupied", Phase::Occupied), ("vacant", Phase::Vacant)] {
            let stats = pattern_stats(&built.geom, state.sigma(), phase)?;
            match stats.summary {
                Some(s) => {
                    let _ = writeln!(
                        csv,
                        "{label},{},{},{},{},{}",
                        stats.feature_count, s.mean_diameter, s.std, s.ci.0, s.ci.1
                    );
                }
                None => {
                    let _ = writeln!(csv, "{label},{},,,,", stats.feature_count);
                }
            }
        }
        snapshots.push(("pattern.csv".to_string(), csv));
    }

    Ok((rows, state.stats, snapshots))
}

/// Runs a validated config and writes all artifacts into `out_dir`
/// (created if missing). Returns the printed summary.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> RunResult<String> {
    let built = config.build()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let canonical = canonical_toml(config)?;
    let hash = sha256_hex(&canonical);
    let mut artifacts = vec!["config.toml".to_string()];
    let mut summary = String::new();

    let started = Instant::now();
    let (csv_text, stats, extra_files) = match &built.mode {
        RunMode::Sweep { schedule, samples_per_point, sample_stride, burn_in } => {
            let plan = SweepPlan {
                cfg: built.sampler,
                h: &built.h,
                hbar: built.hbar.as_ref(),
                cg: built.cg.as_ref(),
                burn_in: *burn_in,
                sample_stride: *sample_stride,
            };
            let run = hysteresis_sweep_with_stats(&plan, schedule, *samples_per_point)?;
            let mut csv = String::from(CURVE_CSV_HEADER);
            csv.push('\n');
            csv.push_str(&run.up.csv_rows());
            csv.push_str(&run.down.csv_rows());
            let _ = writeln!(
                summary,
                "sweep: {} field points per branch, {samples_per_point} samples per point",
                schedule.len()
            );
            (csv, run.stats, Vec::new())
        }
        RunMode::Drive => {
            let (rows, stats, files) = run_drive(&built, config.output.snapshot_stride)?;
            let _ = writeln!(
                summary,
                "drive: {} steps after {} burn-in, {} rows",
                built.sampler.iterations,
                built.sampler.burn_in,
                rows.len()
            );
            (rows_csv(&rows), stats, files)
        }
    };
    let elapsed = started.elapsed().as_secs_f64();

    write_atomic(out_dir, "config.toml", &canonical)?;
    write_atomic(out_dir, &config.output.csv_path, &csv_text)?;
    artifacts.push(config.output.csv_path.clone());
    for (name, contents) in &extra_files {
        write_atomic(out_dir, name, contents)?;
        artifacts.push(name.clone());
    }

    let record = StatsRecord::new(config, &built, &stats);
    let stats_text = toml::to_string_pretty(&record)
        .map_err(|e| ConfigError { key: String::new(), message: e.to_string() })?;
    write_atomic(out_dir, "stats.toml", &stats_text)?;
    artifacts.push("stats.toml".to_string());

    let mut versions = BTreeMap::new();
    versions.insert("cgmc".to_string(), cgmc::VERSION.to_string());
    versions.insert("cgmc-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
    artifacts.sort();
    let manifest = Manifest { config_sha256: hash.clone(), seed: config.sampler.seed, versions, artifacts };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| ConfigError { key: String::new(), message: e.to_string() })?;
    write_atomic(out_dir, "manifest.toml", &manifest_text)?;

    let (ops_text, ops_ok) = report_ops(&record);
    let _ = writeln!(summary, "config sha256 = {hash}");
    let _ = writeln!(summary, "wall time = {elapsed:.2} s");
    let _ = writeln!(summary, "artifacts in {}", out_dir.display());
    summary.push_str(&ops_text);
    if !ops_ok {
        return Err(ConfigError {
            key: String::new(),
            message: format!("operation counters violate the scan formulas\n{summary}"),
        });
    }
    Ok(summary)
}

/// Reads a finished run's counter record and re-checks the operation
/// identities. Returns the report and the verdict.
pub fn report_run(out_dir: &Path) -> RunResult<(String, bool)> {
    let path = out_dir.join("stats.toml");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let record: StatsRecord =
        toml::from_str(&text).map_err(|e| ConfigError { key: String::new(), message: e.to_string() })?;
    Ok(report_ops(&record))
}
