//! Experiment configuration: a TOML schema in which every field has a
//! default except the seed, unknown keys are rejected with their location,
//! and semantic errors name the offending key. [`ExperimentConfig::build`]
//! turns a validated config into the geometry, Hamiltonians and sampler
//! settings the library consumes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use cgmc::energy::{
    benchmark_hamiltonian, coarsen_hamiltonian, CoarseHamiltonian, CoarseLevel, Coupling,
    Hamiltonian,
};
use cgmc::lattice::{CoarseGeometry, LatticeGeometry};
use cgmc::potentials::{cutoff_range, Field, PairPotential, SplitPotential};
use cgmc::samplers::{Ensemble, Method, RejectionPolicy, SamplerConfig, Strategy};

/// A configuration or build problem, annotated with the key it concerns.
#[derive(Debug)]
pub struct ConfigError {
    /// Dotted key path (`lattice.q`) or empty for document-level problems.
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        ConfigError { key: key.to_string(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<cgmc::Error> for ConfigError {
    fn from(e: cgmc::Error) -> Self {
        ConfigError { key: String::new(), message: e.to_string() }
    }
}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

fn default_d() -> usize {
    1
}
fn default_n() -> usize {
    16
}
fn default_q() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    /// Torus dimension, 1 or 2.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Sites per axis.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Coarse-cell edge length per axis; must divide `n`.
    #[serde(default = "default_q")]
    pub q: usize,
}

impl Default for LatticeSection {
    fn default() -> Self {
        LatticeSection { d: default_d(), n: default_n(), q: default_q() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKindName {
    /// Coupling only between adjacent sites; param `coupling`.
    NearestNeighbor,
    /// Mean-field coupling `coupling / N` between every pair.
    CurieWeiss,
    /// Nearest-neighbor `K` plus mean-field `J/N`, pre-split at range 1;
    /// params `K` and `J`.
    Benchmark,
    /// Scaled smooth bump `j0`-normalized over `range`; params `j0`,
    /// `range`.
    KacSmooth,
    /// Scaled algebraic tail `r^{-3/2}`, normalized to total mass `mass`.
    KacAlgebraic,
    /// Gaussian attraction minus weaker, wider Gaussian repulsion; params
    /// `strength`, `r_a`, `r_r`, `chi`, `cutoff`.
    MorseGaussian,
}

impl PotentialKindName {
    pub fn label(&self) -> &'static str {
        match self {
            PotentialKindName::NearestNeighbor => "nearest_neighbor",
            PotentialKindName::CurieWeiss => "curie_weiss",
            PotentialKindName::Benchmark => "benchmark",
            PotentialKindName::KacSmooth => "kac_smooth",
            PotentialKindName::KacAlgebraic => "kac_algebraic",
            PotentialKindName::MorseGaussian => "morse_gaussian",
        }
    }

    /// Known parameter names with their defaults.
    fn param_spec(&self) -> &'static [(&'static str, f64)] {
        match self {
            PotentialKindName::NearestNeighbor | PotentialKindName::CurieWeiss => {
                &[("coupling", 1.0)]
            }
            PotentialKindName::Benchmark => &[("K", 1.0), ("J", 5.0)],
            PotentialKindName::KacSmooth => &[("j0", 1.0), ("range", 8.0)],
            PotentialKindName::KacAlgebraic => &[("mass", 1.0)],
            PotentialKindName::MorseGaussian => &[
                ("strength", 1.0),
                ("r_a", 4.47),
                ("r_r", 10.0),
                ("chi", 0.1),
                ("cutoff", 24.0),
            ],
        }
    }
}

fn default_kind() -> PotentialKindName {
    PotentialKindName::NearestNeighbor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    #[serde(default = "default_kind")]
    pub kind: PotentialKindName,
    /// Kind-specific numeric parameters; unknown names are rejected.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// For `morse_gaussian` only: derive the cutoff as the radius beyond
    /// which `|J| < cutoff_tol`, instead of taking `params.cutoff`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_tol: Option<f64>,
    /// Short/long split radius. Required by the `splitting` and
    /// `approximate_cg` strategies (except for `benchmark`, which is born
    /// split at range 1).
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub s_range: Option<f64>,
    /// Interaction cutoff for the fine-level correction test of the
    /// two-level `corrections` strategy.
    #[serde(rename = "L_c", default, skip_serializing_if = "Option::is_none")]
    pub l_c: Option<f64>,
}

impl Default for PotentialSection {
    fn default() -> Self {
        PotentialSection {
            kind: default_kind(),
            params: BTreeMap::new(),
            cutoff_tol: None,
            s_range: None,
            l_c: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKindName {
    /// Spin-flip dynamics in an external field; coverage fluctuates.
    Canonical,
    /// Spin-exchange dynamics; coverage `c0` is conserved exactly.
    Microcanonical,
}

fn default_ensemble_kind() -> EnsembleKindName {
    EnsembleKindName::Canonical
}
fn default_beta() -> f64 {
    1.0
}
fn default_schedule() -> Vec<f64> {
    vec![0.0]
}
fn default_c0() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "default_ensemble_kind")]
    pub kind: EnsembleKindName,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Field values for canonical runs. More than one value turns the run
    /// into a hysteresis sweep (up the schedule, then back down with the
    /// same warm chain). Ignored by microcanonical runs.
    #[serde(default = "default_schedule")]
    pub h_schedule: Vec<f64>,
    /// Conserved coverage for microcanonical runs. Ignored by canonical
    /// runs.
    #[serde(default = "default_c0")]
    pub c0: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            kind: default_ensemble_kind(),
            beta: default_beta(),
            h_schedule: default_schedule(),
            c0: default_c0(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Mh,
    Cgmc,
    TwoLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Corrections,
    Splitting,
    ApproximateCg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Stay,
    Retry,
}

fn default_method() -> MethodName {
    MethodName::Mh
}
fn default_strategy() -> StrategyName {
    StrategyName::Corrections
}
fn default_iterations() -> u64 {
    10_000
}
fn default_policy() -> PolicyName {
    PolicyName::Stay
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_method")]
    pub method: MethodName,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyName,
    /// Measured steps (after burn-in). For sweeps this is the per-point
    /// budget: one coverage sample is taken every `n^d` steps, so a sweep
    /// point yields `iterations / n^d` samples.
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Equilibration steps. Default when absent: none for single-chain
    /// runs, `n^d` sweeps of `n^d` proposals at each point of a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    /// The only field without a default: reruns must be reproducible on
    /// purpose, not by accident.
    pub seed: u64,
    #[serde(default = "default_policy")]
    pub policy: PolicyName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormatName {
    Csv,
}

fn default_csv_path() -> String {
    "observables.csv".to_string()
}
fn default_format() -> OutputFormatName {
    OutputFormatName::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// File name of the main CSV artifact, relative to the output
    /// directory.
    #[serde(default = "default_csv_path")]
    pub csv_path: String,
    /// Steps between configuration snapshots in single-chain runs; 0 keeps
    /// only the final snapshot. Sweeps take no snapshots.
    #[serde(default)]
    pub snapshot_stride: u64,
    #[serde(default = "default_format")]
    pub format: OutputFormatName,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            csv_path: default_csv_path(),
            snapshot_stride: 0,
            format: default_format(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub lattice: LatticeSection,
    #[serde(default)]
    pub potential: PotentialSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    pub sampler: SamplerSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parses and validates a config document. Schema errors (unknown key,
/// type mismatch) carry the TOML location; semantic errors carry the
/// dotted key path.
pub fn parse_config(text: &str) -> ConfigResult<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| ConfigError::at("", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Canonical serialization used for hashing and for `config.toml` in the
/// output directory. Field order is fixed by the struct definitions and
/// the params map is sorted, so equal configs serialize identically.
pub fn canonical_toml(config: &ExperimentConfig) -> ConfigResult<String> {
    toml::to_string_pretty(config).map_err(|e| ConfigError::at("", e.to_string()))
}

/// What `run` will do with a config.
#[derive(Debug, Clone, PartialEq)]
pub enum RunMode {
    /// One chain driven at fixed conditions.
    Drive,
    /// Warm-started hysteresis sweep up and down `h_schedule`.
    Sweep {
        schedule: Vec<f64>,
        samples_per_point: u64,
        sample_stride: u64,
        burn_in: Option<u64>,
    },
}

/// Everything the runner needs, built from a validated config.
pub struct BuiltExperiment {
    pub geom: LatticeGeometry,
    pub cg: Option<CoarseGeometry>,
    pub h: Hamiltonian,
    pub hbar: Option<CoarseHamiltonian>,
    pub sampler: SamplerConfig,
    pub mode: RunMode,
}

impl ExperimentConfig {
    pub fn validate(&self) -> ConfigResult<()> {
        let lat = &self.lattice;
        if lat.d != 1 && lat.d != 2 {
            return Err(ConfigError::at("lattice.d", format!("{} is not 1 or 2", lat.d)));
        }
        if lat.n < 2 {
            return Err(ConfigError::at("lattice.n", "need at least 2 sites per axis"));
        }
        if lat.q == 0 {
            return Err(ConfigError::at("lattice.q", "cell edge must be positive"));
        }
        if lat.n % lat.q != 0 {
            return Err(ConfigError::at(
                "lattice.q",
                format!("{} does not divide n = {}", lat.q, lat.n),
            ));
        }

        let pot = &self.potential;
        let spec = pot.kind.param_spec();
        for (name, value) in &pot.params {
            if !spec.iter().any(|(known, _)| known == name) {
                let known: Vec<&str> = spec.iter().map(|(k, _)| *k).collect();
                return Err(ConfigError::at(
                    &format!("potential.params.{name}"),
                    format!(
                        "unknown parameter for kind `{}`; expected one of {}",
                        pot.kind.label(),
                        known.join(", ")
                    ),
                ));
            }
            if !value.is_finite() {
                return Err(ConfigError::at(
                    &format!("potential.params.{name}"),
                    "must be finite",
                ));
            }
        }
        if pot.cutoff_tol.is_some() && pot.kind != PotentialKindName::MorseGaussian {
            return Err(ConfigError::at(
                "potential.cutoff_tol",
                "a tolerance-derived cutoff only applies to kind `morse_gaussian`",
            ));
        }
        if let Some(tol) = pot.cutoff_tol {
            if !(tol > 0.0) || !tol.is_finite() {
                return Err(ConfigError::at("potential.cutoff_tol", "must be positive"));
            }
            if pot.params.contains_key("cutoff") {
                return Err(ConfigError::at(
                    "potential.cutoff_tol",
                    "give either params.cutoff or cutoff_tol, not both",
                ));
            }
        }
        if let Some(s) = pot.s_range {
            if !(s > 0.0) || !s.is_finite() {
                return Err(ConfigError::at("potential.S", "split radius must be positive"));
            }
            if pot.kind == PotentialKindName::Benchmark {
                return Err(ConfigError::at(
                    "potential.S",
                    "the benchmark coupling is already split at range 1; S applies to radial kinds",
                ));
            }
        }
        if let Some(lc) = pot.l_c {
            if !(lc > 0.0) || !lc.is_finite() {
                return Err(ConfigError::at("potential.L_c", "cutoff must be positive"));
            }
        }

        let ens = &self.ensemble;
        if !(ens.beta > 0.0) || !ens.beta.is_finite() {
            return Err(ConfigError::at("ensemble.beta", "inverse temperature must be positive"));
        }
        if ens.h_schedule.is_empty() {
            return Err(ConfigError::at("ensemble.h_schedule", "schedule is empty"));
        }
        if ens.h_schedule.iter().any(|h| !h.is_finite()) {
            return Err(ConfigError::at("ensemble.h_schedule", "all field values must be finite"));
        }
        if ens.h_schedule.len() > 1 && ens.h_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::at(
                "ensemble.h_schedule",
                "schedule must be strictly increasing; the down branch is swept automatically",
            ));
        }
        if !(0.0..=1.0).contains(&ens.c0) {
            return Err(ConfigError::at("ensemble.c0", "coverage must lie in [0, 1]"));
        }

        let smp = &self.sampler;
        if smp.iterations == 0 {
            return Err(ConfigError::at("sampler.iterations", "need at least one step"));
        }

        let micro = ens.kind == EnsembleKindName::Microcanonical;
        if micro {
            if ens.h_schedule.len() > 1 {
                return Err(ConfigError::at(
                    "ensemble.h_schedule",
                    "exchange dynamics conserve coverage; a field sweep cannot move it",
                ));
            }
            if smp.method == MethodName::Cgmc {
                return Err(ConfigError::at(
                    "sampler.method",
                    "the coarse-only sampler is canonical (adsorb/desorb); \
                     microcanonical runs need mh or two_level",
                ));
            }
            if smp.method == MethodName::TwoLevel && smp.strategy == StrategyName::ApproximateCg {
                return Err(ConfigError::at(
                    "sampler.strategy",
                    "approximate_cg targets the canonical product measure; \
                     it has no exchange variant",
                ));
            }
        }

        let needs_split = smp.method != MethodName::Mh
            && matches!(smp.strategy, StrategyName::Splitting | StrategyName::ApproximateCg);
        let kind_split = pot.kind == PotentialKindName::Benchmark;
        if needs_split && !kind_split && pot.s_range.is_none() {
            return Err(ConfigError::at(
                "potential.S",
                format!(
                    "strategy `{}` coarsens only the long-range part; \
                     set the split radius S (or use the pre-split `benchmark` kind)",
                    match smp.strategy {
                        StrategyName::Splitting => "splitting",
                        _ => "approximate_cg",
                    }
                ),
            ));
        }
        if pot.l_c.is_some()
            && !(smp.method == MethodName::TwoLevel && smp.strategy == StrategyName::Corrections)
        {
            return Err(ConfigError::at(
                "potential.L_c",
                "the correction cutoff applies to the two_level corrections strategy",
            ));
        }

        if self.is_sweep() {
            let stride = self.sites() as u64;
            let samples = smp.iterations / stride;
            if samples < 4 {
                return Err(ConfigError::at(
                    "sampler.iterations",
                    format!(
                        "a sweep point takes one sample per {stride} steps (one lattice \
                         sweep); {} iterations yield {samples} samples, need at least 4",
                        smp.iterations
                    ),
                ));
            }
            if self.output.snapshot_stride > 0 {
                return Err(ConfigError::at(
                    "output.snapshot_stride",
                    "snapshots apply to single-chain runs, not sweeps",
                ));
            }
        }

        if self.output.csv_path.is_empty() {
            return Err(ConfigError::at("output.csv_path", "file name is empty"));
        }
        let bad_path = std::path::Path::new(&self.output.csv_path)
            .components()
            .any(|c| !matches!(c, std::path::Component::Normal(_)));
        if bad_path {
            return Err(ConfigError::at(
                "output.csv_path",
                "must be a plain relative file name inside the output directory",
            ));
        }
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.lattice.n.pow(self.lattice.d as u32)
    }

    /// True when the run is a two-branch field sweep rather than a single
    /// drive.
    pub fn is_sweep(&self) -> bool {
        self.ensemble.kind == EnsembleKindName::Canonical && self.ensemble.h_schedule.len() > 1
    }

    fn param(&self, name: &str) -> f64 {
        let spec = self.potential.kind.param_spec();
        self.potential.params.get(name).copied().unwrap_or_else(|| {
            spec.iter()
                .find(|(known, _)| *known == name)
                .map(|(_, default)| *default)
                .expect("parameter name comes from the kind's own spec")
        })
    }

    fn build_potential(&self, geom: &LatticeGeometry) -> ConfigResult<PairPotential> {
        let pot = match self.potential.kind {
            PotentialKindName::NearestNeighbor => {
                PairPotential::nearest_neighbor(geom, self.param("coupling"))?
            }
            PotentialKindName::CurieWeiss => {
                PairPotential::curie_weiss(geom, self.param("coupling"))?
            }
            PotentialKindName::KacSmooth => {
                PairPotential::kac_smooth(geom, self.param("j0"), self.param("range"))?
            }
            PotentialKindName::KacAlgebraic => {
                PairPotential::kac_algebraic(geom, self.param("mass"))?
            }
            PotentialKindName::MorseGaussian => {
                let cutoff = match self.potential.cutoff_tol {
                    Some(tol) => {
                        // Build at the widest cutoff the torus supports,
                        // then trim to the requested tolerance.
                        let widest = PairPotential::morse_gaussian(
                            geom,
                            self.param("strength"),
                            self.param("r_a"),
                            self.param("r_r"),
                            self.param("chi"),
                            (self.lattice.n / 2) as f64,
                        )?;
                        cutoff_range(&widest, tol)? as f64
                    }
                    None => self.param("cutoff"),
                };
                PairPotential::morse_gaussian(
                    geom,
                    self.param("strength"),
                    self.param("r_a"),
                    self.param("r_r"),
                    self.param("chi"),
                    cutoff,
                )?
            }
            PotentialKindName::Benchmark => {
                unreachable!("benchmark builds a Hamiltonian directly")
            }
        };
        Ok(pot)
    }

    /// Builds the library objects. Call only on a validated config.
    pub fn build(&self) -> ConfigResult<BuiltExperiment> {
        self.validate()?;
        let geom = LatticeGeometry::new(self.lattice.d, self.lattice.n)?;
        let beta = self.ensemble.beta;
        let micro = self.ensemble.kind == EnsembleKindName::Microcanonical;
        // Exchange dynamics never look at the field; sweeps re-field per
        // point. The built field is the first schedule value.
        let h0 = if micro { 0.0 } else { self.ensemble.h_schedule[0] };

        let h = if self.potential.kind == PotentialKindName::Benchmark {
            benchmark_hamiltonian(&geom, self.param("K"), self.param("J"), h0, beta)?
        } else {
            let pot = self.build_potential(&geom)?;
            let coupling = match self.potential.s_range {
                Some(s) => Coupling::Split(Arc::new(SplitPotential::split(&pot, s)?)),
                None => Coupling::Single(Arc::new(pot)),
            };
            Hamiltonian::new(coupling, Field::Constant(h0), beta)?
        };

        let method = match self.sampler.method {
            MethodName::Mh => Method::Mh,
            MethodName::Cgmc => Method::Cgmc,
            MethodName::TwoLevel => Method::TwoLevel,
        };
        let strategy = match self.sampler.strategy {
            StrategyName::Corrections => Strategy::Corrections,
            StrategyName::Splitting => Strategy::Splitting,
            StrategyName::ApproximateCg => Strategy::ApproximateCg,
        };

        let (cg, hbar) = if method == Method::Mh {
            (None, None)
        } else {
            let cg = CoarseGeometry::new(&geom, self.lattice.q)?;
            // The coarse-only chain and the corrections strategy compress
            // the full interaction; the splitting strategies compress only
            // its long-range part and test the short part fine.
            let level = match (method, strategy) {
                (Method::Cgmc, _) | (_, Strategy::Corrections) => CoarseLevel::FullInteraction,
                _ => CoarseLevel::LongRangeOnly,
            };
            let hbar = coarsen_hamiltonian(&h, &cg, level)?;
            (Some(cg), Some(hbar))
        };

        let mode = if self.is_sweep() {
            RunMode::Sweep {
                schedule: self.ensemble.h_schedule.clone(),
                samples_per_point: self.sampler.iterations / self.sites() as u64,
                sample_stride: self.sites() as u64,
                burn_in: self.sampler.burn_in,
            }
        } else {
            RunMode::Drive
        };

        let mut sampler = SamplerConfig::new(method, self.sampler.seed);
        sampler.strategy = strategy;
        sampler.ensemble = if micro { Ensemble::Microcanonical } else { Ensemble::Canonical };
        sampler.iterations = self.sampler.iterations;
        sampler.burn_in = match mode {
            // The sweep applies its own per-point burn-in.
            RunMode::Sweep { .. } => 0,
            RunMode::Drive => self.sampler.burn_in.unwrap_or(0),
        };
        sampler.policy = match self.sampler.policy {
            PolicyName::Stay => RejectionPolicy::Stay,
            PolicyName::Retry => RejectionPolicy::Retry,
        };
        // Cap the main CSV at ~1000 rows regardless of budget.
        sampler.stride = (self.sampler.iterations / 1000).max(1);
        sampler.initial_coverage = if micro { Some(self.ensemble.c0) } else { None };
        sampler.correction_cutoff = self.potential.l_c;

        Ok(BuiltExperiment { geom, cg, h, hbar, sampler, mode })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "[sampler]\nseed = 7\n"
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(minimal()).unwrap();
        assert_eq!(cfg.lattice.d, 1);
        assert_eq!(cfg.lattice.n, 16);
        assert_eq!(cfg.sampler.seed, 7);
        assert_eq!(cfg.ensemble.h_schedule, vec![0.0]);
        assert!(!cfg.is_sweep());
        cfg.build().unwrap();
    }

    #[test]
    fn seed_is_the_only_required_field() {
        let err = parse_config("[sampler]\nmethod = \"mh\"\n").unwrap_err();
        assert!(err.message.contains("seed"), "unexpected message: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = parse_config("[sampler]\nseed = 1\nwalrus = 3\n").unwrap_err();
        assert!(err.message.contains("walrus"), "unexpected message: {err}");
        let err = parse_config("[sampler]\nseed = 1\n[lattice]\nm = 4\n").unwrap_err();
        assert!(err.message.contains('m'), "unexpected message: {err}");
    }

    #[test]
    fn q_must_divide_n() {
        let text = "[lattice]\nn = 16\nq = 3\n[sampler]\nseed = 1\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.key, "lattice.q");
        assert!(err.message.contains("does not divide n = 16"));
    }

    #[test]
    fn unknown_potential_parameter_is_rejected() {
        let text = "[potential]\nkind = \"kac_smooth\"\nparams = { j0 = 1.0, mass = 2.0 }\n\
                    [sampler]\nseed = 1\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.key, "potential.params.mass");
    }

    #[test]
    fn splitting_without_split_radius_is_rejected() {
        let text = "[potential]\nkind = \"kac_smooth\"\n[sampler]\nseed = 1\n\
                    method = \"two_level\"\nstrategy = \"splitting\"\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.key, "potential.S");
    }

    #[test]
    fn microcanonical_sweep_is_rejected() {
        let text = "[ensemble]\nkind = \"microcanonical\"\nh_schedule = [0.0, 1.0]\n\
                    [sampler]\nseed = 1\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.key, "ensemble.h_schedule");
    }

    #[test]
    fn canonical_toml_round_trips() {
        let text = "[lattice]\nd = 2\nn = 8\nq = 2\n[potential]\nkind = \"benchmark\"\n\
                    params = { K = 1.0, J = 5.0 }\n[ensemble]\nbeta = 0.5\n\
                    h_schedule = [0.0, 1.0, 2.0]\n[sampler]\nseed = 9\nmethod = \"two_level\"\n\
                    iterations = 2048\n";
        let cfg = parse_config(text).unwrap();
        let canon = canonical_toml(&cfg).unwrap();
        let back = parse_config(&canon).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(canon, canonical_toml(&back).unwrap());
    }
}
