//! Coverage and curve observables: warm-started hysteresis sweeps over a
//! field schedule, l2 distances between coverage curves, batch-means
//! confidence intervals, goodness-of-fit, and 2D pattern feature
//! statistics (torus-aware connected components with equivalent-circle
//! diameters).

use std::f64::consts::PI;

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::energy::{stable_sum, CoarseHamiltonian, Hamiltonian};
use crate::lattice::{CoarseGeometry, LatticeGeometry, MicroConfig};
use crate::potentials::Field;
use crate::samplers::{
    drive, drive_coarse, prepare_coarse_chain, prepare_fine_chain, AcceptanceStats, ChainState,
    CoarseChainState, DriveSettings, Ensemble, Method, SamplerConfig, DIRS,
};
use crate::{Error, Result};

/// Fraction of occupied sites, `N^{-1} sum_x sigma(x)`.
pub fn coverage(sigma: &MicroConfig) -> f64 {
    sigma.particle_count() as f64 / sigma.len() as f64
}

/// Student-t two-sided quantile at confidence `p` for `df` degrees of
/// freedom.
fn student_t_quantile(p: f64, df: usize) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::argument(format!("t distribution: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// Batch-means point estimate with a 95% Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMeans {
    pub mean: f64,
    /// Standard deviation of the batch means.
    pub batch_std: f64,
    /// Half width of the 95% confidence interval.
    pub half_width: f64,
    pub batches: usize,
}

impl BatchMeans {
    pub fn ci(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }

    pub fn contains(&self, value: f64) -> bool {
        let (lo, hi) = self.ci();
        lo <= value && value <= hi
    }

    /// Batch-means standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.batch_std / (self.batches as f64).sqrt()
    }
}

/// Splits the samples into `batches` equal contiguous blocks (discarding
/// the remainder), and reports the mean of the batch means with the
/// 95% interval `mean +- t * batch_std / sqrt(batches)`. Correlated but
/// stationary chain output becomes approximately independent at the batch
/// level, which is what licenses the t interval.
pub fn batch_means_ci(samples: &[f64], batches: usize) -> Result<BatchMeans> {
    if batches < 2 {
        return Err(Error::argument("batch means need at least two batches"));
    }
    if samples.len() < batches {
        return Err(Error::refused(format!(
            "{} samples cannot fill {batches} batches",
            samples.len()
        )));
    }
    let size = samples.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| stable_sum(&samples[b * size..(b + 1) * size]) / size as f64)
        .collect();
    let mean = stable_sum(&means) / batches as f64;
    let devs: Vec<f64> = means
        .iter()
        .map(|m| {
            let d = m - mean;
            d * d
        })
        .collect();
    let batch_std = (stable_sum(&devs) / (batches - 1) as f64).sqrt();
    let t = student_t_quantile(0.975, batches - 1)?;
    Ok(BatchMeans {
        mean,
        batch_std,
        half_width: t * batch_std / (batches as f64).sqrt(),
        batches,
    })
}

/// Pearson goodness-of-fit result.
#[derive(Debug, Clone, Copy)]
pub struct GofResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Bin count after pooling low-expectation bins.
    pub pooled_bins: usize,
}

/// Pearson chi-square test of observed counts against expected counts.
/// Consecutive bins are pooled until each carries an expectation of at
/// least 5, the standard validity rule for the chi-square approximation.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<GofResult> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::argument("observed and expected bins must match and be nonempty"));
    }
    if expected.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
        return Err(Error::argument("expected counts must be finite and nonnegative"));
    }
    let total_obs: u64 = observed.iter().sum();
    let total_exp = stable_sum(expected);
    if total_obs == 0 || (total_exp - total_obs as f64).abs() > 1e-6 * total_exp.max(1.0) {
        return Err(Error::argument(format!(
            "expected counts sum to {total_exp}, observed to {total_obs}"
        )));
    }

    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut obs_acc, mut exp_acc) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        obs_acc += o as f64;
        exp_acc += e;
        if exp_acc >= 5.0 {
            pooled.push((obs_acc, exp_acc));
            obs_acc = 0.0;
            exp_acc = 0.0;
        }
    }
    if exp_acc > 0.0 || obs_acc > 0.0 {
        // Fold the low-expectation tail into the last pooled bin.
        match pooled.last_mut() {
            Some(last) => {
                last.0 += obs_acc;
                last.1 += exp_acc;
            }
            None => return Err(Error::refused("too little expected mass to pool any bin to 5")),
        }
    }
    if pooled.len() < 2 {
        return Err(Error::refused("fewer than two bins remain after pooling"));
    }

    let terms: Vec<f64> = pooled
        .iter()
        .map(|&(o, e)| {
            let d = o - e;
            d * d / e
        })
        .collect();
    let statistic = stable_sum(&terms);
    let dof = pooled.len() - 1;
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::argument(format!("chi-square distribution: {e}")))?;
    Ok(GofResult {
        statistic,
        dof,
        p_value: dist.sf(statistic),
        pooled_bins: pooled.len(),
    })
}

/// Sweep direction of one hysteresis branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Up,
    Down,
}

impl Branch {
    pub fn label(&self) -> &'static str {
        match self {
            Branch::Up => "up",
            Branch::Down => "down",
        }
    }
}

/// One equilibrated field point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub h: f64,
    pub coverage: f64,
    pub std_error: f64,
}

/// Mean coverage against the external field along one sweep direction.
#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisCurve {
    branch: Branch,
    points: Vec<CurvePoint>,
}

pub const CURVE_CSV_HEADER: &str = "branch,h,coverage,std_error";

impl HysteresisCurve {
    /// Validates strict field monotonicity in the branch direction and
    /// coverage in [0, 1].
    pub fn new(branch: Branch, points: Vec<CurvePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::argument("a hysteresis branch needs at least one point"));
        }
        for w in points.windows(2) {
            let ordered = match branch {
                Branch::Up => w[0].h < w[1].h,
                Branch::Down => w[0].h > w[1].h,
            };
            if !ordered {
                return Err(Error::argument(format!(
                    "field values must be strictly {} within the {} branch",
                    if branch == Branch::Up { "increasing" } else { "decreasing" },
                    branch.label()
                )));
            }
        }
        if points
            .iter()
            .any(|p| !(0.0..=1.0).contains(&p.coverage) || !p.coverage.is_finite())
        {
            return Err(Error::argument("coverage must lie in [0, 1]"));
        }
        Ok(Self { branch, points })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    /// CSV rows under [`CURVE_CSV_HEADER`], one per point.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.branch.label(),
                p.h,
                p.coverage,
                p.std_error
            ));
        }
        out
    }
}

/// `sqrt(sum_h (c - c_ref)^2)` over identical field grids.
pub fn l2_error(curve: &HysteresisCurve, reference: &HysteresisCurve) -> Result<f64> {
    if curve.points.len() != reference.points.len()
        || curve
            .points
            .iter()
            .zip(&reference.points)
            .any(|(a, b)| a.h != b.h)
    {
        return Err(Error::argument("curves are sampled on different field grids"));
    }
    let terms: Vec<f64> = curve
        .points
        .iter()
        .zip(&reference.points)
        .map(|(a, b)| {
            let d = a.coverage - b.coverage;
            d * d
        })
        .collect();
    Ok(stable_sum(&terms).sqrt())
}

/// Everything a hysteresis sweep needs besides the schedule: the sampler
/// configuration, the Hamiltonians whose field the sweep overwrites, and
/// the per-point equilibration.
#[derive(Debug, Clone)]
pub struct SweepPlan<'a> {
    pub cfg: SamplerConfig,
    pub h: &'a Hamiltonian,
    pub hbar: Option<&'a CoarseHamiltonian>,
    pub cg: Option<&'a CoarseGeometry>,
    /// Equilibration steps at each field point; `None` means N sweeps of N
    /// proposals each.
    pub burn_in: Option<u64>,
    /// Steps between retained coverage samples.
    pub sample_stride: u64,
}

enum SweepChain {
    Fine(ChainState),
    Coarse(CoarseChainState),
}

/// Both branches of a field sweep plus the chain's cumulative proposal
/// and operation counters, for runs that report cost next to the physics.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub up: HysteresisCurve,
    pub down: HysteresisCurve,
    pub stats: AcceptanceStats,
}

/// Sweeps the field up the schedule and back down with one warm-started
/// chain (the down branch continues from the up branch's end state, which
/// is what exposes metastability). At each point the chain equilibrates
/// for the plan's burn-in, then `samples_per_point` coverage samples are
/// taken one stride apart; the point records their batch-means estimate.
pub fn hysteresis_sweep(
    plan: &SweepPlan,
    schedule: &[f64],
    samples_per_point: u64,
) -> Result<(HysteresisCurve, HysteresisCurve)> {
    let run = hysteresis_sweep_with_stats(plan, schedule, samples_per_point)?;
    Ok((run.up, run.down))
}

/// [`hysteresis_sweep`] plus the chain's lifetime counters (burn-in
/// proposals included, since the counters describe total work done).
pub fn hysteresis_sweep_with_stats(
    plan: &SweepPlan,
    schedule: &[f64],
    samples_per_point: u64,
) -> Result<SweepRun> {
    if schedule.is_empty() {
        return Err(Error::argument("field schedule is empty"));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::argument("field schedule must be strictly increasing"));
    }
    if samples_per_point < 4 {
        return Err(Error::argument("need at least 4 samples per field point"));
    }
    if plan.sample_stride == 0 {
        return Err(Error::argument("sample stride must be positive"));
    }
    if plan.cfg.ensemble == Ensemble::Microcanonical {
        return Err(Error::config(
            "exchange dynamics conserve coverage; a field sweep cannot move it",
        ));
    }

    let geom = plan.h.geometry();
    let sites = geom.sites() as u64;
    let burn_in = plan.burn_in.unwrap_or(sites * sites);
    let batches = ((samples_per_point / 2).min(16).max(2)) as usize;

    let mut chain = match plan.cfg.method {
        Method::Mh => SweepChain::Fine(prepare_fine_chain(&plan.cfg, geom, None)?),
        Method::TwoLevel => {
            let cg = plan
                .cg
                .ok_or_else(|| Error::config("two-level sweeps need the cell layout"))?;
            SweepChain::Fine(prepare_fine_chain(&plan.cfg, geom, Some(cg))?)
        }
        Method::Cgmc => {
            let cg = plan
                .cg
                .ok_or_else(|| Error::config("coarse-only sweeps need the cell layout"))?;
            SweepChain::Coarse(prepare_coarse_chain(&plan.cfg, cg)?)
        }
    };
    if plan.cfg.method != Method::Mh && plan.hbar.is_none() {
        return Err(Error::config("coarse sampling needs a coarse Hamiltonian"));
    }

    let settings = DriveSettings {
        iterations: samples_per_point * plan.sample_stride,
        burn_in,
        stride: plan.sample_stride,
        step_offset: 0,
        ..plan.cfg.drive_settings()
    };

    let sweep_points = |values: &mut dyn Iterator<Item = f64>,
                            chain: &mut SweepChain|
     -> Result<Vec<CurvePoint>> {
        let mut points = Vec::new();
        for hv in values {
            let h_pt = plan.h.with_field(Field::Constant(hv))?;
            let hbar_pt = match (plan.hbar, plan.cg) {
                (Some(hb), Some(cg)) => Some(hb.with_field(cg, &Field::Constant(hv))),
                _ => None,
            };
            let rows = match chain {
                SweepChain::Fine(state) => drive(state, &h_pt, hbar_pt.as_ref(), &settings)?,
                SweepChain::Coarse(state) => {
                    drive_coarse(state, hbar_pt.as_ref().expect("checked above"), &settings)?
                }
            };
            let samples: Vec<f64> = rows.iter().map(|r| r.coverage).collect();
            let bm = batch_means_ci(&samples, batches)?;
            points.push(CurvePoint {
                h: hv,
                coverage: bm.mean,
                std_error: bm.std_error(),
            });
        }
        Ok(points)
    };

    let up_points = sweep_points(&mut schedule.iter().cloned(), &mut chain)?;
    let down_points = sweep_points(&mut schedule.iter().rev().cloned(), &mut chain)?;
    let stats = match &chain {
        SweepChain::Fine(state) => state.stats,
        SweepChain::Coarse(state) => state.stats,
    };
    Ok(SweepRun {
        up: HysteresisCurve::new(Branch::Up, up_points)?,
        down: HysteresisCurve::new(Branch::Down, down_points)?,
        stats,
    })
}

/// Which occupation value counts as the feature phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Occupied,
    Vacant,
}

/// Diameter statistics over the detected features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSummary {
    /// Mean equivalent-circle diameter, in lattice units.
    pub mean_diameter: f64,
    pub std: f64,
    /// 95% confidence interval for the mean diameter.
    pub ci: (f64, f64),
}

/// Connected-component census of one phase. `summary` is `None` exactly
/// when no feature exists, signalling that the statistics are undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternStats {
    pub feature_count: usize,
    pub summary: Option<FeatureSummary>,
}

/// Labels 4-connected components of the selected phase on the 2D torus
/// and summarizes their equivalent-circle diameters `2 sqrt(area / pi)`.
/// A single-feature census has a degenerate (zero-width) interval.
pub fn pattern_stats(
    geom: &LatticeGeometry,
    sigma: &MicroConfig,
    phase: Phase,
) -> Result<PatternStats> {
    if geom.dim() != 2 {
        return Err(Error::argument("feature statistics are defined on 2D lattices"));
    }
    if sigma.len() != geom.sites() {
        return Err(Error::argument("configuration size != lattice size"));
    }
    let target: u8 = match phase {
        Phase::Occupied => 1,
        Phase::Vacant => 0,
    };

    let mut visited = vec![false; sigma.len()];
    let mut stack: Vec<usize> = Vec::new();
    let mut diameters: Vec<f64> = Vec::new();
    for start in 0..sigma.len() {
        if visited[start] || sigma.get(start) != target {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut area = 0u64;
        while let Some(x) = stack.pop() {
            area += 1;
            for d in &DIRS {
                let y = geom.offset(x, d.0, d.1);
                if !visited[y] && sigma.get(y) == target {
                    visited[y] = true;
                    stack.push(y);
                }
            }
        }
        diameters.push(2.0 * (area as f64 / PI).sqrt());
    }

    let count = diameters.len();
    if count == 0 {
        return Ok(PatternStats {
            feature_count: 0,
            summary: None,
        });
    }
    let mean = stable_sum(&diameters) / count as f64;
    let summary = if count == 1 {
        FeatureSummary {
            mean_diameter: mean,
            std: 0.0,
            ci: (mean, mean),
        }
    } else {
        let devs: Vec<f64> = diameters
            .iter()
            .map(|d| {
                let v = d - mean;
                v * v
            })
            .collect();
        let std = (stable_sum(&devs) / (count - 1) as f64).sqrt();
        let half = student_t_quantile(0.975, count - 1)? * std / (count as f64).sqrt();
        FeatureSummary {
            mean_diameter: mean,
            std,
            ci: (mean - half, mean + half),
        }
    };
    Ok(PatternStats {
        feature_count: count,
        summary: Some(summary),
    })
}
