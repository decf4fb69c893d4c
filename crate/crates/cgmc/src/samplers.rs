//! Metropolis samplers on one or two levels.
//!
//! Three chain families share one accounting scheme:
//!
//! * `mh_step`: single-level Metropolis with a symmetric proposal (site
//!   flip or nearest-neighbor exchange), acceptance `min{1, e^{-b dH}}`.
//! * `cgmc_step`: a chain on block counts only, targeting the compressed
//!   Gibbs measure times the binomial prior. The adsorb/desorb proposal is
//!   weighted so its Hastings ratio cancels the prior ratio exactly,
//!   leaving `min{1, e^{-b dHbar}}`.
//! * `two_level_step` / `two_level_exchange_step`: propose on the coarse
//!   level, test with the coarse energy difference; on acceptance,
//!   reconstruct a matching fine move (uniform site within the cell) and
//!   run a second test whose exponent restores the fine-level target.
//!
//! Counter convention: every sampler is read as a two-stage kernel. A
//! stage a method does not have (the coarse stage of `mh_step`, the fine
//! stage of `cgmc_step`) is the identity, accepts always, and costs no
//! operations. This keeps `m_coarse_accepted == n_fine_proposed` an
//! invariant across all methods and makes rates comparable.
//!
//! Operation counters record neighbor visits of acceptance-test energy
//! evaluations only (one local-field scan costs `scan_trips()` visits);
//! observable bookkeeping is never counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{stable_sum, CoarseHamiltonian, CoarseLevel, Coupling, Hamiltonian};
use crate::lattice::{project, CoarseConfig, CoarseGeometry, LatticeGeometry, MicroConfig};
use crate::potentials::Field;
use crate::{Error, Result};

/// Axis directions, first `2 d` entries valid in dimension `d`.
pub(crate) const DIRS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Bound on the retry policy's coarse re-proposal loop; exceeding it means
/// the chain is effectively frozen and the step reports an error instead
/// of spinning.
const MAX_COARSE_RETRIES: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Mh,
    Cgmc,
    TwoLevel,
}

/// How the fine-level test of the two-level sampler is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Coarse level compresses the full interaction; fine exponent is the
    /// exact remainder `dH - dHbar`. Exact for the fine Gibbs measure.
    Corrections,
    /// Coarse level compresses only the long-range part of a split
    /// coupling; fine exponent is the exact remainder. Exact as well.
    Splitting,
    /// Like splitting but the fine test keeps only the short-range pair
    /// term, so the chain targets the product approximation
    /// `exp(-b [H_short + Hbar_long]) x prior` instead of the fine Gibbs
    /// measure.
    ApproximateCg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ensemble {
    /// Spin-flip dynamics; particle number fluctuates.
    Canonical,
    /// Spin-exchange dynamics; coverage is conserved exactly.
    Microcanonical,
}

/// What a two-level step does when the coarse test rejects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionPolicy {
    /// Keep the current state; the rejected mass sits on the diagonal.
    /// The exactness statements hold for this policy.
    Stay,
    /// Draw fresh coarse proposals until one is accepted (bounded by an
    /// internal budget). Excluded from exactness claims.
    Retry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKernel {
    /// Pick a site uniformly, propose the flip. Symmetric.
    UniformFlip,
    /// Pick a cell uniformly, then adsorb with probability `(Q - n_k)/Q`
    /// or desorb with probability `n_k/Q`. Not symmetric; its Hastings
    /// ratio cancels the binomial prior ratio.
    CoarseAdsorbDesorb,
    /// Pick a site and an axis direction uniformly, propose the exchange
    /// with that neighbor. Symmetric.
    UniformExchange,
    /// Pick an ordered adjacent cell pair uniformly, propose moving one
    /// particle with weight `n_k (Q - n_l) / Q^2` (the deficit stays put).
    CoarseParticleMove,
}

impl ProposalKernel {
    /// True when the kernel proposes every pair with equal forward and
    /// reverse probability.
    pub fn is_symmetric(&self) -> bool {
        matches!(self, ProposalKernel::UniformFlip | ProposalKernel::UniformExchange)
    }
}

/// Proposal and acceptance counters plus neighbor-visit totals.
///
/// `n_coarse_proposed` counts first-stage proposals, `m_coarse_accepted`
/// first-stage acceptances; the fine pair mirrors them for the second
/// stage. Under the identity-stage convention (module docs),
/// `m_coarse_accepted == n_fine_proposed` always.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AcceptanceStats {
    pub n_coarse_proposed: u64,
    pub m_coarse_accepted: u64,
    pub n_fine_proposed: u64,
    pub n_fine_accepted: u64,
    /// Neighbor visits in fine-level long-range (or unsplit) scans.
    pub ops_long: u64,
    /// Neighbor visits in fine-level short-range scans.
    pub ops_short: u64,
    /// Neighbor visits in coarse-level cell scans.
    pub ops_coarse: u64,
}

impl AcceptanceStats {
    pub fn total_ops(&self) -> u64 {
        self.ops_long + self.ops_short + self.ops_coarse
    }

    pub fn merge(&mut self, other: &AcceptanceStats) {
        self.n_coarse_proposed += other.n_coarse_proposed;
        self.m_coarse_accepted += other.m_coarse_accepted;
        self.n_fine_proposed += other.n_fine_proposed;
        self.n_fine_accepted += other.n_fine_accepted;
        self.ops_long += other.ops_long;
        self.ops_short += other.ops_short;
        self.ops_coarse += other.ops_coarse;
    }

    /// Counter increments since an earlier snapshot of the same chain.
    pub fn delta_since(&self, earlier: &AcceptanceStats) -> AcceptanceStats {
        AcceptanceStats {
            n_coarse_proposed: self.n_coarse_proposed - earlier.n_coarse_proposed,
            m_coarse_accepted: self.m_coarse_accepted - earlier.m_coarse_accepted,
            n_fine_proposed: self.n_fine_proposed - earlier.n_fine_proposed,
            n_fine_accepted: self.n_fine_accepted - earlier.n_fine_accepted,
            ops_long: self.ops_long - earlier.ops_long,
            ops_short: self.ops_short - earlier.ops_short,
            ops_coarse: self.ops_coarse - earlier.ops_coarse,
        }
    }

    /// (coarse, fine, total) acceptance rates; total is overall moves per
    /// first-stage proposal. Errors when nothing was proposed. A stage
    /// with zero proposals reports rate 1 (it never rejected anything).
    pub fn average_acceptance(&self) -> Result<(f64, f64, f64)> {
        if self.n_coarse_proposed == 0 && self.n_fine_proposed == 0 {
            return Err(Error::argument("acceptance rates need at least one proposal"));
        }
        let (coarse, fine) = self.lenient_rates();
        let total = if self.n_coarse_proposed > 0 {
            self.n_fine_accepted as f64 / self.n_coarse_proposed as f64
        } else {
            fine
        };
        Ok((coarse, fine, total))
    }

    fn lenient_rates(&self) -> (f64, f64) {
        let coarse = if self.n_coarse_proposed > 0 {
            self.m_coarse_accepted as f64 / self.n_coarse_proposed as f64
        } else {
            1.0
        };
        let fine = if self.n_fine_proposed > 0 {
            self.n_fine_accepted as f64 / self.n_fine_proposed as f64
        } else {
            1.0
        };
        (coarse, fine)
    }
}

/// Result of one two-stage step. `energy_delta` is the change applied to
/// the chain's running target-level energy (0 unless the step moved).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub coarse_accepted: bool,
    pub fine_accepted: bool,
    pub energy_delta: f64,
}

impl StepOutcome {
    fn rejected(coarse_accepted: bool) -> Self {
        StepOutcome {
            coarse_accepted,
            fine_accepted: false,
            energy_delta: 0.0,
        }
    }

    fn moved(energy_delta: f64) -> Self {
        StepOutcome {
            coarse_accepted: true,
            fine_accepted: true,
            energy_delta,
        }
    }

    pub fn moved_state(&self) -> bool {
        self.fine_accepted
    }
}

/// Cached block counts kept consistent with the fine configuration.
#[derive(Debug, Clone)]
pub struct CoarseCache {
    cg: CoarseGeometry,
    eta: CoarseConfig,
}

/// A fine-level chain: configuration, optional coarse cache, generator and
/// counters. One chain is strictly sequential; replicas get independent
/// generator streams.
#[derive(Debug, Clone)]
pub struct ChainState {
    sigma: MicroConfig,
    coarse: Option<CoarseCache>,
    rng: ChaCha8Rng,
    pub stats: AcceptanceStats,
}

impl ChainState {
    /// Single-level chain (no coarse cache).
    pub fn new(sigma: MicroConfig, seed: u64) -> Self {
        ChainState {
            sigma,
            coarse: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: AcceptanceStats::default(),
        }
    }

    /// Chain with a coarse cache, initialized to the projection of `sigma`.
    pub fn with_coarse(sigma: MicroConfig, cg: CoarseGeometry, seed: u64) -> Self {
        let eta = project(&cg, &sigma);
        ChainState {
            sigma,
            coarse: Some(CoarseCache { cg, eta }),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: AcceptanceStats::default(),
        }
    }

    /// Select an independent generator stream (replica / sweep index).
    pub fn set_stream(&mut self, stream: u64) {
        self.rng.set_stream(stream);
    }

    pub fn sigma(&self) -> &MicroConfig {
        &self.sigma
    }

    pub fn eta(&self) -> Option<&CoarseConfig> {
        self.coarse.as_ref().map(|c| &c.eta)
    }

    /// Checks the block-count cache against a fresh projection.
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.coarse {
            if project(&c.cg, &self.sigma) != c.eta {
                return Err(Error::refused("coarse cache out of sync with configuration"));
            }
        }
        Ok(())
    }
}

/// A coarse-only chain over block counts.
#[derive(Debug, Clone)]
pub struct CoarseChainState {
    eta: CoarseConfig,
    q: usize,
    rng: ChaCha8Rng,
    pub stats: AcceptanceStats,
}

impl CoarseChainState {
    pub fn new(cg: &CoarseGeometry, eta: CoarseConfig, seed: u64) -> Result<Self> {
        if eta.cells() != cg.cells() {
            return Err(Error::config("block-count length != cell count"));
        }
        Ok(CoarseChainState {
            eta,
            q: cg.cell_volume(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: AcceptanceStats::default(),
        })
    }

    pub fn set_stream(&mut self, stream: u64) {
        self.rng.set_stream(stream);
    }

    pub fn eta(&self) -> &CoarseConfig {
        &self.eta
    }

    pub fn cell_volume(&self) -> usize {
        self.q
    }
}

/// Accept with probability `min{1, e^{-beta delta}}`. Consumes randomness
/// only when the outcome is uncertain.
fn metropolis_accept(rng: &mut ChaCha8Rng, beta: f64, delta: f64) -> bool {
    let a = -beta * delta;
    a >= 0.0 || rng.gen::<f64>() < a.exp()
}

fn fine_flip_ops(stats: &mut AcceptanceStats, coupling: &Coupling, scans: u64) {
    stats.ops_long += scans * coupling.long_trips();
    stats.ops_short += scans * coupling.short_trips();
}

/// One single-level Metropolis step with a symmetric proposal. Returns the
/// outcome in two-stage form (the coarse stage is the identity here).
pub fn mh_step(state: &mut ChainState, h: &Hamiltonian, kernel: ProposalKernel) -> Result<StepOutcome> {
    let geom = h.geometry();
    let n = geom.sites();
    let ChainState {
        sigma,
        coarse,
        rng,
        stats,
    } = state;
    stats.n_coarse_proposed += 1;
    stats.m_coarse_accepted += 1;
    stats.n_fine_proposed += 1;
    match kernel {
        ProposalKernel::UniformFlip => {
            let x = rng.gen_range(0..n);
            fine_flip_ops(stats, h.coupling(), 1);
            let delta = h.delta_flip(sigma, x);
            if !metropolis_accept(rng, h.beta(), delta) {
                return Ok(StepOutcome::rejected(true));
            }
            if let Some(c) = coarse {
                c.eta.add(c.cg.cell_of(x), if sigma.get(x) == 0 { 1 } else { -1 });
            }
            sigma.flip(x);
            stats.n_fine_accepted += 1;
            Ok(StepOutcome::moved(delta))
        }
        ProposalKernel::UniformExchange => {
            if n < 2 {
                return Err(Error::config("exchange dynamics need at least two sites"));
            }
            let x = rng.gen_range(0..n);
            let dir = DIRS[rng.gen_range(0..2 * geom.dim())];
            let y = geom.offset(x, dir.0, dir.1);
            if sigma.get(x) == sigma.get(y) {
                // Identity proposal: accepted, no energy evaluation.
                stats.n_fine_accepted += 1;
                return Ok(StepOutcome::moved(0.0));
            }
            fine_flip_ops(stats, h.coupling(), 2);
            let delta = h.delta_exchange(sigma, x, y)?;
            if !metropolis_accept(rng, h.beta(), delta) {
                return Ok(StepOutcome::rejected(true));
            }
            if let Some(c) = coarse {
                let (ck, cl) = (c.cg.cell_of(x), c.cg.cell_of(y));
                if ck != cl {
                    let toward_y = sigma.get(x) == 1;
                    c.eta.add(ck, if toward_y { -1 } else { 1 });
                    c.eta.add(cl, if toward_y { 1 } else { -1 });
                }
            }
            sigma.exchange(x, y)?;
            stats.n_fine_accepted += 1;
            Ok(StepOutcome::moved(delta))
        }
        _ => Err(Error::argument("mh_step needs a symmetric fine-level kernel")),
    }
}

/// One step of the coarse-only chain targeting
/// `exp(-b Hbar) x product-binomial prior`. The adsorb/desorb proposal
/// weights cancel the prior ratio, so the test uses the energy difference
/// alone. The fine stage is the identity.
pub fn cgmc_step(
    state: &mut CoarseChainState,
    hbar: &CoarseHamiltonian,
    kernel: ProposalKernel,
) -> Result<StepOutcome> {
    if kernel != ProposalKernel::CoarseAdsorbDesorb {
        return Err(Error::argument("cgmc_step needs the adsorb/desorb kernel"));
    }
    let m = hbar.geometry().sites();
    if state.eta.cells() != m {
        return Err(Error::config("block-count length != cell count"));
    }
    let q = state.q;
    let CoarseChainState { eta, rng, stats, .. } = state;
    let k = rng.gen_range(0..m);
    let nk = eta.get(k);
    let adsorb = rng.gen::<f64>() < (q - nk) as f64 / q as f64;
    stats.n_coarse_proposed += 1;
    stats.ops_coarse += hbar.scan_trips();
    let delta = if adsorb {
        hbar.delta_adsorb(eta, k)
    } else {
        hbar.delta_desorb(eta, k)
    };
    if !metropolis_accept(rng, hbar.beta(), delta) {
        return Ok(StepOutcome::rejected(false));
    }
    eta.add(k, if adsorb { 1 } else { -1 });
    stats.m_coarse_accepted += 1;
    stats.n_fine_proposed += 1;
    stats.n_fine_accepted += 1;
    Ok(StepOutcome::moved(delta))
}

/// Settings of the two-level flip sampler.
#[derive(Debug, Clone, Copy)]
pub struct TwoLevelSettings {
    strategy: Strategy,
    policy: RejectionPolicy,
    correction_cutoff: Option<f64>,
    cutoff_pairs: u64,
}

impl TwoLevelSettings {
    pub fn new(strategy: Strategy, policy: RejectionPolicy) -> Self {
        TwoLevelSettings {
            strategy,
            policy,
            correction_cutoff: None,
            cutoff_pairs: 0,
        }
    }

    /// Truncate the corrections-strategy fine exponent to pairs within
    /// distance `l_c` (an approximation; exactness claims no longer
    /// apply). The pair count per test is precomputed here for the
    /// operation counters.
    pub fn with_correction_cutoff(mut self, geom: &LatticeGeometry, l_c: f64) -> Result<Self> {
        if self.strategy != Strategy::Corrections {
            return Err(Error::config("a correction cutoff applies to the corrections strategy only"));
        }
        if !(l_c > 0.0) {
            return Err(Error::config("correction cutoff must be positive"));
        }
        self.correction_cutoff = Some(l_c);
        self.cutoff_pairs = (1..geom.sites())
            .filter(|&y| geom.distance(0, y) <= l_c)
            .count() as u64;
        Ok(self)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn policy(&self) -> RejectionPolicy {
        self.policy
    }
}

pub(crate) fn check_two_level_pairing(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    strategy: Strategy,
) -> Result<()> {
    match strategy {
        Strategy::Corrections => {
            if hbar.level() != CoarseLevel::FullInteraction {
                return Err(Error::config(
                    "corrections strategy needs a coarse Hamiltonian compressing the full interaction",
                ));
            }
        }
        Strategy::Splitting | Strategy::ApproximateCg => {
            if hbar.level() != CoarseLevel::LongRangeOnly {
                return Err(Error::config(
                    "splitting strategies need a coarse Hamiltonian compressing the long range only",
                ));
            }
            if h.coupling().split().is_none() {
                return Err(Error::config("splitting strategies need a split coupling"));
            }
        }
    }
    if h.beta() != hbar.beta() {
        return Err(Error::config("fine and coarse levels disagree on the inverse temperature"));
    }
    Ok(())
}

/// Whether the splitting strategy may skip its fine-level long-range
/// remainder: the compression must be exact and the field uniform (so the
/// cell-averaged field cancels sitewise). When this is false the fine
/// stage falls back to the exact exponent, paying a full long-range scan
/// per fine test to stay reversible.
pub fn splitting_skips_remainder(h: &Hamiltonian, hbar: &CoarseHamiltonian) -> bool {
    hbar.is_exact() && matches!(h.field(), Field::Constant(_))
}

/// Fine-stage test exponent for a flip at `x` after the coarse stage
/// accepted a change of `coarse_delta`. Shared by the sampler and the dense
/// kernel builder so the verified kernel is exactly the simulated one.
pub(crate) fn fine_flip_exponent(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    strategy: Strategy,
    sigma: &MicroConfig,
    x: usize,
    coarse_delta: f64,
) -> Result<f64> {
    Ok(match strategy {
        Strategy::Corrections => h.delta_flip(sigma, x) - coarse_delta,
        Strategy::Splitting => {
            if splitting_skips_remainder(h, hbar) {
                h.delta_flip_short(sigma, x)?
            } else {
                h.delta_flip(sigma, x) - coarse_delta
            }
        }
        Strategy::ApproximateCg => h.delta_flip_short(sigma, x)?,
    })
}

/// One two-stage flip step: adsorb/desorb proposal and test on the coarse
/// level; on acceptance, uniform single-site reconstruction in the chosen
/// cell and a fine-level test whose exponent depends on the strategy.
pub fn two_level_step(
    state: &mut ChainState,
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    settings: &TwoLevelSettings,
) -> Result<StepOutcome> {
    check_two_level_pairing(h, hbar, settings.strategy)?;
    let ChainState {
        sigma,
        coarse,
        rng,
        stats,
    } = state;
    let cache = coarse
        .as_mut()
        .ok_or_else(|| Error::config("two-level step needs a chain with a coarse cache"))?;
    let (cg, eta) = (&cache.cg, &mut cache.eta);
    let m = cg.cells();
    let q = cg.cell_volume();
    let beta = h.beta();

    let mut attempts = 0u64;
    let (k, adsorb, coarse_delta) = loop {
        attempts += 1;
        if attempts > MAX_COARSE_RETRIES {
            return Err(Error::refused(format!(
                "no coarse acceptance within {MAX_COARSE_RETRIES} retries"
            )));
        }
        let k = rng.gen_range(0..m);
        let nk = eta.get(k);
        let adsorb = rng.gen::<f64>() < (q - nk) as f64 / q as f64;
        stats.n_coarse_proposed += 1;
        stats.ops_coarse += hbar.scan_trips();
        let delta = if adsorb {
            hbar.delta_adsorb(eta, k)
        } else {
            hbar.delta_desorb(eta, k)
        };
        if metropolis_accept(rng, beta, delta) {
            break (k, adsorb, delta);
        }
        if settings.policy == RejectionPolicy::Stay {
            return Ok(StepOutcome::rejected(false));
        }
    };
    stats.m_coarse_accepted += 1;

    // Reconstruction: uniform site of the matching occupation in cell k.
    let nk = eta.get(k);
    let x = if adsorb {
        sigma.pick_in_cell(cg, k, 0, q - nk, rng)
    } else {
        sigma.pick_in_cell(cg, k, 1, nk, rng)
    };
    stats.n_fine_proposed += 1;

    // Truncated corrections recompute the exact energy change for the
    // ledger when the move lands; exact strategies get it for free as
    // coarse_delta + fine_exp.
    let mut exact_delta = None;
    let fine_exp = match (settings.strategy, settings.correction_cutoff) {
        (Strategy::Corrections, Some(l_c)) => {
            stats.ops_long += settings.cutoff_pairs;
            let e = crate::energy::delta_correction(h, hbar, cg, sigma, eta, x, Some(l_c));
            exact_delta = Some(h.delta_flip(sigma, x));
            e
        }
        (strategy, _) => {
            match strategy {
                Strategy::Splitting if splitting_skips_remainder(h, hbar) => {
                    stats.ops_short += h.coupling().short_trips();
                }
                Strategy::ApproximateCg => {
                    stats.ops_short += h.coupling().short_trips();
                }
                _ => fine_flip_ops(stats, h.coupling(), 1),
            }
            fine_flip_exponent(h, hbar, strategy, sigma, x, coarse_delta)?
        }
    };
    if !metropolis_accept(rng, beta, fine_exp) {
        return Ok(StepOutcome::rejected(true));
    }
    sigma.flip(x);
    eta.add(k, if adsorb { 1 } else { -1 });
    stats.n_fine_accepted += 1;
    Ok(StepOutcome::moved(exact_delta.unwrap_or(coarse_delta + fine_exp)))
}

/// One microcanonical two-stage step. With probability 1/2 a plain
/// nearest-neighbor exchange with the full fine test (no coarse stage);
/// otherwise an adjacent-cell particle transfer: proposed with weight
/// `n_k (Q - n_l)/Q^2` (the deficit keeps the state), tested with the
/// coarse energy difference, reconstructed as a uniform occupied/vacant
/// site pair, and finished with the exact remainder test. Coverage is
/// conserved by construction.
pub fn two_level_exchange_step(
    state: &mut ChainState,
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
) -> Result<StepOutcome> {
    if hbar.level() != CoarseLevel::FullInteraction {
        return Err(Error::config(
            "microcanonical two-level sampling compresses the full interaction",
        ));
    }
    if h.beta() != hbar.beta() {
        return Err(Error::config("fine and coarse levels disagree on the inverse temperature"));
    }
    let geom = h.geometry();
    let ChainState {
        sigma,
        coarse,
        rng,
        stats,
    } = state;
    let cache = coarse
        .as_mut()
        .ok_or_else(|| Error::config("two-level step needs a chain with a coarse cache"))?;
    let (cg, eta) = (&cache.cg, &mut cache.eta);
    let m = cg.cells();
    if m < 2 || geom.sites() < 2 {
        return Err(Error::config("microcanonical two-level sampling needs at least two cells"));
    }
    let q = cg.cell_volume();
    let beta = h.beta();

    if rng.gen::<f64>() < 0.5 {
        // Fine branch: symmetric nearest-neighbor exchange, full test.
        let x = rng.gen_range(0..geom.sites());
        let dir = DIRS[rng.gen_range(0..2 * geom.dim())];
        let y = geom.offset(x, dir.0, dir.1);
        stats.n_coarse_proposed += 1;
        stats.m_coarse_accepted += 1;
        stats.n_fine_proposed += 1;
        if sigma.get(x) == sigma.get(y) {
            stats.n_fine_accepted += 1;
            return Ok(StepOutcome::moved(0.0));
        }
        fine_flip_ops(stats, h.coupling(), 2);
        let delta = h.delta_exchange(sigma, x, y)?;
        if !metropolis_accept(rng, beta, delta) {
            return Ok(StepOutcome::rejected(true));
        }
        let (ck, cl) = (cg.cell_of(x), cg.cell_of(y));
        if ck != cl {
            let toward_y = sigma.get(x) == 1;
            eta.add(ck, if toward_y { -1 } else { 1 });
            eta.add(cl, if toward_y { 1 } else { -1 });
        }
        sigma.exchange(x, y)?;
        stats.n_fine_accepted += 1;
        return Ok(StepOutcome::moved(delta));
    }

    // Coarse branch: transfer one particle to an adjacent cell.
    let k = rng.gen_range(0..m);
    let dir = DIRS[rng.gen_range(0..2 * cg.coarse().dim())];
    let l = cg.coarse().offset(k, dir.0, dir.1);
    let (nk, nl) = (eta.get(k), eta.get(l));
    let weight = (nk * (q - nl)) as f64 / (q * q) as f64;
    if rng.gen::<f64>() >= weight {
        // Proposal mass on the current state; nothing proposed or tested.
        return Ok(StepOutcome::rejected(false));
    }
    stats.n_coarse_proposed += 1;
    stats.ops_coarse += 2 * hbar.scan_trips();
    let coarse_delta = hbar.delta_move(eta, k, l)?;
    if !metropolis_accept(rng, beta, coarse_delta) {
        return Ok(StepOutcome::rejected(false));
    }
    stats.m_coarse_accepted += 1;

    let x = sigma.pick_in_cell(cg, k, 1, nk, rng);
    let y = sigma.pick_in_cell(cg, l, 0, q - nl, rng);
    stats.n_fine_proposed += 1;
    fine_flip_ops(stats, h.coupling(), 2);
    let fine_exp = h.delta_exchange(sigma, x, y)? - coarse_delta;
    if !metropolis_accept(rng, beta, fine_exp) {
        return Ok(StepOutcome::rejected(true));
    }
    eta.add(k, -1);
    eta.add(l, 1);
    sigma.exchange(x, y)?;
    stats.n_fine_accepted += 1;
    Ok(StepOutcome::moved(coarse_delta + fine_exp))
}

/// Chain-run settings shared by the drivers. The inverse temperature rides
/// with the Hamiltonians.
#[derive(Debug, Clone, Copy)]
pub struct DriveSettings {
    pub method: Method,
    pub strategy: Strategy,
    pub ensemble: Ensemble,
    pub policy: RejectionPolicy,
    pub iterations: u64,
    pub burn_in: u64,
    /// Row emission period in steps; 0 emits only the final row. The final
    /// step always emits.
    pub stride: u64,
    pub correction_cutoff: Option<f64>,
    /// Added to emitted step indices (for runs sliced into segments).
    pub step_offset: u64,
}

impl DriveSettings {
    pub fn new(method: Method) -> Self {
        DriveSettings {
            method,
            strategy: Strategy::Corrections,
            ensemble: Ensemble::Canonical,
            policy: RejectionPolicy::Stay,
            iterations: 10_000,
            burn_in: 0,
            stride: 0,
            correction_cutoff: None,
            step_offset: 0,
        }
    }
}

/// One emitted observable record. Rates and operation counters are
/// cumulative over the chain's lifetime.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableRow {
    pub step: u64,
    pub h: f64,
    pub coverage: f64,
    pub energy: f64,
    pub coarse_acc_rate: f64,
    pub fine_acc_rate: f64,
    pub ops_long: u64,
    pub ops_short: u64,
    pub ops_coarse: u64,
}

impl ObservableRow {
    pub const CSV_HEADER: &'static str =
        "step,h,coverage,energy,coarse_acc_rate,fine_acc_rate,ops_long,ops_short,ops_coarse";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.h,
            self.coverage,
            self.energy,
            self.coarse_acc_rate,
            self.fine_acc_rate,
            self.ops_long,
            self.ops_short,
            self.ops_coarse
        )
    }
}

fn field_mean(field: &Field, sites: usize) -> f64 {
    match field {
        Field::Constant(v) => *v,
        Field::PerSite(v) => stable_sum(v) / sites as f64,
    }
}

fn emit_row(step: u64, h_value: f64, coverage: f64, energy: f64, stats: &AcceptanceStats) -> ObservableRow {
    let (coarse_acc_rate, fine_acc_rate) = stats.lenient_rates();
    ObservableRow {
        step,
        h: h_value,
        coverage,
        energy,
        coarse_acc_rate,
        fine_acc_rate,
        ops_long: stats.ops_long,
        ops_short: stats.ops_short,
        ops_coarse: stats.ops_coarse,
    }
}

/// Advances a fine-level chain by `burn_in + iterations` steps, emitting
/// rows during the measurement phase. Deterministic given the chain's
/// generator state. The running energy is recomputed once at entry:
/// the fine energy for exact methods, the approximation-target energy
/// `H_short + Hbar_long` for `ApproximateCg`.
pub fn drive(
    state: &mut ChainState,
    h: &Hamiltonian,
    hbar: Option<&CoarseHamiltonian>,
    settings: &DriveSettings,
) -> Result<Vec<ObservableRow>> {
    if state.sigma.len() != h.geometry().sites() {
        return Err(Error::config("configuration size != lattice size"));
    }
    let approximate = settings.method == Method::TwoLevel && settings.strategy == Strategy::ApproximateCg;
    if approximate && settings.ensemble == Ensemble::Microcanonical {
        return Err(Error::config(
            "the approximate strategy is canonical; exchange dynamics use the exact remainder",
        ));
    }
    let hbar = match settings.method {
        Method::Mh => None,
        Method::TwoLevel => {
            let hb = hbar.ok_or_else(|| Error::config("two-level sampling needs a coarse Hamiltonian"))?;
            let cache = state
                .coarse
                .as_ref()
                .ok_or_else(|| Error::config("two-level sampling needs a chain with a coarse cache"))?;
            if hb.geometry().sites() != cache.cg.cells() {
                return Err(Error::config("coarse Hamiltonian does not match the cell layout"));
            }
            Some(hb)
        }
        Method::Cgmc => return Err(Error::config("coarse-only chains run through drive_coarse")),
    };
    let two_level = match settings.method {
        Method::TwoLevel => {
            let mut s = TwoLevelSettings::new(settings.strategy, settings.policy);
            if let Some(l_c) = settings.correction_cutoff {
                s = s.with_correction_cutoff(h.geometry(), l_c)?;
            }
            Some(s)
        }
        _ => None,
    };

    let mut energy = if approximate {
        h.energy_split(&state.sigma)?.short
            + hbar.unwrap().energy(state.eta().expect("two-level cache"))
    } else {
        h.energy(&state.sigma)
    };
    let h_value = field_mean(h.field(), h.geometry().sites());
    let sites = state.sigma.len() as f64;

    let mut rows = Vec::new();
    for step in 1..=(settings.burn_in + settings.iterations) {
        let outcome = match settings.method {
            Method::Mh => {
                let kernel = match settings.ensemble {
                    Ensemble::Canonical => ProposalKernel::UniformFlip,
                    Ensemble::Microcanonical => ProposalKernel::UniformExchange,
                };
                mh_step(state, h, kernel)?
            }
            Method::TwoLevel => match settings.ensemble {
                Ensemble::Canonical => {
                    two_level_step(state, h, hbar.unwrap(), two_level.as_ref().unwrap())?
                }
                Ensemble::Microcanonical => two_level_exchange_step(state, h, hbar.unwrap())?,
            },
            Method::Cgmc => unreachable!(),
        };
        energy += outcome.energy_delta;
        if step > settings.burn_in {
            let measured = step - settings.burn_in;
            let last = measured == settings.iterations;
            if (settings.stride > 0 && measured % settings.stride == 0) || last {
                rows.push(emit_row(
                    settings.step_offset + measured,
                    h_value,
                    state.sigma.particle_count() as f64 / sites,
                    energy,
                    &state.stats,
                ));
            }
        }
    }
    Ok(rows)
}

/// Coarse-only counterpart of [`drive`]; the running energy is the coarse
/// Hamiltonian's.
pub fn drive_coarse(
    state: &mut CoarseChainState,
    hbar: &CoarseHamiltonian,
    settings: &DriveSettings,
) -> Result<Vec<ObservableRow>> {
    if settings.method != Method::Cgmc {
        return Err(Error::config("drive_coarse runs coarse-only chains"));
    }
    if settings.ensemble == Ensemble::Microcanonical {
        return Err(Error::config("the coarse-only sampler is canonical (adsorb/desorb)"));
    }
    let mut energy = hbar.energy(&state.eta);
    let m = hbar.geometry().sites();
    let h_value = (0..m).map(|k| hbar.potential().hbar(k)).sum::<f64>() / m as f64;
    let sites = (state.q * state.eta.cells()) as f64;

    let mut rows = Vec::new();
    for step in 1..=(settings.burn_in + settings.iterations) {
        let outcome = cgmc_step(state, hbar, ProposalKernel::CoarseAdsorbDesorb)?;
        energy += outcome.energy_delta;
        if step > settings.burn_in {
            let measured = step - settings.burn_in;
            let last = measured == settings.iterations;
            if (settings.stride > 0 && measured % settings.stride == 0) || last {
                rows.push(emit_row(
                    settings.step_offset + measured,
                    h_value,
                    state.eta.particle_count() as f64 / sites,
                    energy,
                    &state.stats,
                ));
            }
        }
    }
    Ok(rows)
}

/// Full chain-run configuration: drive settings plus the seed and the
/// initial condition.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub method: Method,
    pub strategy: Strategy,
    pub ensemble: Ensemble,
    pub iterations: u64,
    pub burn_in: u64,
    pub seed: u64,
    pub policy: RejectionPolicy,
    pub stride: u64,
    /// Initial coverage; `None` draws each site fair-coin. Microcanonical
    /// chains conserve whatever this fixes.
    pub initial_coverage: Option<f64>,
    pub correction_cutoff: Option<f64>,
}

impl SamplerConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        SamplerConfig {
            method,
            strategy: Strategy::Corrections,
            ensemble: Ensemble::Canonical,
            iterations: 10_000,
            burn_in: 0,
            seed,
            policy: RejectionPolicy::Stay,
            stride: 0,
            initial_coverage: None,
            correction_cutoff: None,
        }
    }

    pub fn drive_settings(&self) -> DriveSettings {
        DriveSettings {
            method: self.method,
            strategy: self.strategy,
            ensemble: self.ensemble,
            policy: self.policy,
            iterations: self.iterations,
            burn_in: self.burn_in,
            stride: self.stride,
            correction_cutoff: self.correction_cutoff,
            step_offset: 0,
        }
    }
}

/// Where a finished run left the chain.
#[derive(Debug, Clone)]
pub enum FinalState {
    Fine(ChainState),
    Coarse(CoarseChainState),
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub rows: Vec<ObservableRow>,
    pub stats: AcceptanceStats,
    pub final_state: FinalState,
}

fn initial_config(
    geom: &LatticeGeometry,
    coverage: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<MicroConfig> {
    match coverage {
        None => Ok(MicroConfig::random(geom, rng)),
        Some(c) => {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config(format!("initial coverage must lie in [0,1], got {c}")));
            }
            let count = (c * geom.sites() as f64).round() as usize;
            MicroConfig::random_with_count(geom, count, rng)
        }
    }
}

/// Builds a fine chain state exactly as [`run_chain`] does: the seed
/// stream first draws the initial configuration, then drives the chain.
/// Pass the cell layout to attach the coarse cache two-level steps need.
pub fn prepare_fine_chain(
    cfg: &SamplerConfig,
    geom: &LatticeGeometry,
    cg: Option<&CoarseGeometry>,
) -> Result<ChainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = initial_config(geom, cfg.initial_coverage, &mut rng)?;
    let mut state = match cg {
        None => ChainState::new(sigma, cfg.seed),
        Some(cg) => ChainState::with_coarse(sigma, cg.clone(), cfg.seed),
    };
    state.rng = rng;
    Ok(state)
}

/// Coarse counterpart of [`prepare_fine_chain`]: draws the same initial
/// fine configuration from the seed stream and projects it.
pub fn prepare_coarse_chain(cfg: &SamplerConfig, cg: &CoarseGeometry) -> Result<CoarseChainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = initial_config(cg.fine(), cfg.initial_coverage, &mut rng)?;
    let mut state = CoarseChainState::new(cg, project(cg, &sigma), cfg.seed)?;
    state.rng = rng;
    Ok(state)
}

/// Runs one chain from scratch: seeds the generator, draws the initial
/// configuration from it, then drives. Same config and seed give
/// bit-identical rows.
pub fn run_chain(
    cfg: &SamplerConfig,
    h: &Hamiltonian,
    hbar: Option<&CoarseHamiltonian>,
    cg: Option<&CoarseGeometry>,
) -> Result<ChainRun> {
    match cfg.method {
        Method::Mh => {
            let mut state = prepare_fine_chain(cfg, h.geometry(), None)?;
            let rows = drive(&mut state, h, None, &cfg.drive_settings())?;
            Ok(ChainRun {
                rows,
                stats: state.stats,
                final_state: FinalState::Fine(state),
            })
        }
        Method::TwoLevel => {
            let cg = cg.ok_or_else(|| Error::config("two-level sampling needs the cell layout"))?;
            let mut state = prepare_fine_chain(cfg, h.geometry(), Some(cg))?;
            let rows = drive(&mut state, h, hbar, &cfg.drive_settings())?;
            Ok(ChainRun {
                rows,
                stats: state.stats,
                final_state: FinalState::Fine(state),
            })
        }
        Method::Cgmc => {
            let cg = cg.ok_or_else(|| Error::config("coarse-only sampling needs the cell layout"))?;
            let hbar =
                hbar.ok_or_else(|| Error::config("coarse-only sampling needs a coarse Hamiltonian"))?;
            let mut state = prepare_coarse_chain(cfg, cg)?;
            let rows = drive_coarse(&mut state, hbar, &cfg.drive_settings())?;
            Ok(ChainRun {
                rows,
                stats: state.stats,
                final_state: FinalState::Coarse(state),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{benchmark_hamiltonian, coarsen_hamiltonian};
    use crate::lattice::enumerate_coarse_configs;
    use crate::lattice::enumerate_configs;
    use crate::potentials::PairPotential;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn chain_geom(n: usize) -> LatticeGeometry {
        LatticeGeometry::new(1, n).unwrap()
    }

    /// Sample mean and batch-means standard error.
    fn batch_mean_se(samples: &[f64], batches: usize) -> (f64, f64) {
        let len = samples.len() / batches * batches;
        let bs = len / batches;
        let means: Vec<f64> = (0..batches)
            .map(|b| samples[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64)
            .collect();
        let mean = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (mean, (var / batches as f64).sqrt())
    }

    fn binom(q: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (q - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn mh_accepts_everything_at_beta_zero() {
        let geom = chain_geom(8);
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.3, 0.0).unwrap();
        let mut state = ChainState::new(MicroConfig::empty(&geom), 11);
        for _ in 0..1000 {
            mh_step(&mut state, &h, ProposalKernel::UniformFlip).unwrap();
        }
        assert_eq!(state.stats.n_fine_accepted, 1000);
        assert_eq!(state.stats.n_fine_proposed, 1000);
        assert_eq!(state.stats.m_coarse_accepted, state.stats.n_fine_proposed);
    }

    #[test]
    fn mh_accepts_downhill_moves() {
        // Strongly negative field: adsorbing anywhere lowers the energy.
        let geom = chain_geom(8);
        let pot = PairPotential::nearest_neighbor(&geom, 0.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(-10.0),
            5.0,
        )
        .unwrap();
        let mut state = ChainState::new(MicroConfig::empty(&geom), 3);
        for _ in 0..200 {
            mh_step(&mut state, &h, ProposalKernel::UniformFlip).unwrap();
        }
        // Every proposal on a vacant site is downhill; the lattice fills.
        assert_eq!(state.sigma().particle_count(), 8);
    }

    #[test]
    fn mh_rejects_wrong_kernels() {
        let geom = chain_geom(4);
        let h = benchmark_hamiltonian(&geom, 1.0, 1.0, 0.0, 1.0).unwrap();
        let mut state = ChainState::new(MicroConfig::empty(&geom), 1);
        assert!(mh_step(&mut state, &h, ProposalKernel::CoarseAdsorbDesorb).is_err());
    }

    #[test]
    fn mh_coverage_matches_enumeration() {
        // 1D ring, nearest-neighbor coupling beta K = 0.5, no field.
        let geom = chain_geom(8);
        let pot = PairPotential::nearest_neighbor(&geom, 1.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(0.0),
            0.5,
        )
        .unwrap();
        let mut weight_sum = 0.0;
        let mut cov_sum = 0.0;
        for sigma in enumerate_configs(&geom).unwrap() {
            let w = (-0.5 * h.energy(&sigma)).exp();
            weight_sum += w;
            cov_sum += w * sigma.particle_count() as f64 / 8.0;
        }
        let exact = cov_sum / weight_sum;

        let mut state = ChainState::new(MicroConfig::empty(&geom), 2024);
        let mut covs = Vec::with_capacity(1_000_000);
        for _ in 0..1_000_000 {
            mh_step(&mut state, &h, ProposalKernel::UniformFlip).unwrap();
            covs.push(state.sigma().particle_count() as f64 / 8.0);
        }
        let (mean, se) = batch_mean_se(&covs, 50);
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "mean {mean} exact {exact} se {se}"
        );
    }

    #[test]
    fn cgmc_prior_sampling_at_beta_zero() {
        let geom = chain_geom(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 1.0, 4.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(0.0),
            0.0,
        )
        .unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let eta = CoarseConfig::from_counts(&cg, vec![0; 4]).unwrap();
        let mut state = CoarseChainState::new(&cg, eta, 5).unwrap();
        let steps = 200_000;
        let mut mean0 = 0.0;
        let mut var0 = 0.0;
        for _ in 0..steps {
            cgmc_step(&mut state, &hbar, ProposalKernel::CoarseAdsorbDesorb).unwrap();
            let v = state.eta().get(0) as f64;
            mean0 += v;
            var0 += (v - 2.0) * (v - 2.0);
            assert!(state.eta().get(0) <= 4);
        }
        mean0 /= steps as f64;
        var0 /= steps as f64;
        // Binomial(4, 1/2): mean 2, variance 1.
        assert!((mean0 - 2.0).abs() < 0.05, "mean {mean0}");
        assert!((var0 - 1.0).abs() < 0.1, "var {var0}");
    }

    #[test]
    fn cgmc_matches_coarse_enumeration() {
        let geom = chain_geom(8);
        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 1.5, 3.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(0.4),
            1.0,
        )
        .unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();

        // Oracle: exact expectation of eta(0) under exp(-b Hbar) x prior.
        let mut wsum = 0.0;
        let mut esum = 0.0;
        for eta in enumerate_coarse_configs(&cg).unwrap() {
            let prior: f64 = (0..4).map(|k| binom(2, eta.get(k))).product();
            let w = (-hbar.energy(&eta)).exp() * prior;
            wsum += w;
            esum += w * eta.get(0) as f64;
        }
        let exact = esum / wsum;

        let eta0 = project(&cg, &MicroConfig::empty(&geom));
        let mut state = CoarseChainState::new(&cg, eta0, 77).unwrap();
        let mut samples = Vec::with_capacity(400_000);
        for _ in 0..400_000 {
            cgmc_step(&mut state, &hbar, ProposalKernel::CoarseAdsorbDesorb).unwrap();
            samples.push(state.eta().get(0) as f64);
        }
        let (mean, se) = batch_mean_se(&samples, 50);
        assert!(
            (mean - exact).abs() < 3.5 * se,
            "mean {mean} exact {exact} se {se}"
        );
    }

    #[test]
    fn two_level_identity_compression_always_accepts_fine() {
        // q = 1 with a single (unsplit) coupling: the coarse table equals
        // the fine table entry for entry, so the remainder is exactly zero
        // and the fine stage never consumes randomness.
        let geom = chain_geom(8);
        let cg = CoarseGeometry::new(&geom, 1).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 1.2, 3.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(0.5),
            1.0,
        )
        .unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        assert!(hbar.is_exact());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = MicroConfig::random(&geom, &mut rng);
        let mut state = ChainState::with_coarse(sigma, cg, 21);
        let settings = TwoLevelSettings::new(Strategy::Corrections, RejectionPolicy::Stay);
        for _ in 0..10_000 {
            two_level_step(&mut state, &h, &hbar, &settings).unwrap();
        }
        assert_eq!(state.stats.n_fine_accepted, state.stats.n_fine_proposed);
        assert!(state.stats.n_fine_proposed > 0);
        state.validate().unwrap();
    }

    #[test]
    fn benchmark_fine_exponent_matches_closed_form() {
        // Splitting on the nearest-neighbor + mean-field pair: the fine
        // test reduces to the short-range flip energy
        // (2 s(x) - 1) K (s(x-1) + s(x+1)).
        let geom = chain_geom(10);
        let k = 0.8;
        let h = benchmark_hamiltonian(&geom, k, 5.0, 0.3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            let x = rng.gen_range(0..10);
            let s = sigma.get(x) as f64;
            let nn = (sigma.get((x + 9) % 10) + sigma.get((x + 1) % 10)) as f64;
            let expect = (2.0 * s - 1.0) * k * nn;
            assert_abs_diff_eq!(h.delta_flip_short(&sigma, x).unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_level_strategies_run_and_stay_consistent() {
        let geom = chain_geom(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.5, 0.7).unwrap();
        let full = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let long = coarsen_hamiltonian(&h, &cg, CoarseLevel::LongRangeOnly).unwrap();
        for (strategy, hbar) in [
            (Strategy::Corrections, &full),
            (Strategy::Splitting, &long),
            (Strategy::ApproximateCg, &long),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let sigma = MicroConfig::random(&geom, &mut rng);
            let mut state = ChainState::with_coarse(sigma, cg.clone(), 31);
            let settings = TwoLevelSettings::new(strategy, RejectionPolicy::Stay);
            for _ in 0..20_000 {
                two_level_step(&mut state, &h, hbar, &settings).unwrap();
            }
            state.validate().unwrap();
            assert_eq!(state.stats.m_coarse_accepted, state.stats.n_fine_proposed);
            assert_eq!(state.stats.n_coarse_proposed, 20_000);
        }
        // Mismatched pairing is refused.
        let mut state = ChainState::with_coarse(MicroConfig::empty(&geom), cg, 1);
        let settings = TwoLevelSettings::new(Strategy::Corrections, RejectionPolicy::Stay);
        assert!(two_level_step(&mut state, &h, &long, &settings).is_err());
    }

    #[test]
    fn retry_policy_exhausts_on_frozen_chain() {
        // Empty lattice and an enormous uphill field: every proposal is an
        // adsorption with vanishing acceptance, so retry hits its budget.
        let geom = chain_geom(8);
        let pot = PairPotential::nearest_neighbor(&geom, 0.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(1.0e6),
            1.0,
        )
        .unwrap();
        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let mut state = ChainState::with_coarse(MicroConfig::empty(&geom), cg, 8);
        let settings = TwoLevelSettings::new(Strategy::Corrections, RejectionPolicy::Retry);
        assert!(matches!(
            two_level_step(&mut state, &h, &hbar, &settings),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn retry_policy_advances_where_stay_would_wait() {
        let geom = chain_geom(8);
        let h = benchmark_hamiltonian(&geom, 1.0, 3.0, 0.5, 0.8).unwrap();
        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let sigma = MicroConfig::random(&geom, &mut rng);
        let mut state = ChainState::with_coarse(sigma, cg, 13);
        let settings = TwoLevelSettings::new(Strategy::Corrections, RejectionPolicy::Retry);
        for _ in 0..2000 {
            let out = two_level_step(&mut state, &h, &hbar, &settings).unwrap();
            // Retry only returns after a coarse acceptance.
            assert!(out.coarse_accepted);
        }
        state.validate().unwrap();
        assert_eq!(state.stats.m_coarse_accepted, 2000);
        assert!(state.stats.n_coarse_proposed >= 2000);
    }

    #[test]
    fn microcanonical_conserves_coverage_and_cache() {
        let geom = LatticeGeometry::new(2, 8).unwrap();
        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        let h = benchmark_hamiltonian(&geom, 1.0, 2.0, 0.0, 0.8).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = MicroConfig::random_with_count(&geom, 32, &mut rng).unwrap();
        let mut state = ChainState::with_coarse(sigma, cg, 55);
        for _ in 0..100_000 {
            two_level_exchange_step(&mut state, &h, &hbar).unwrap();
            assert_eq!(state.sigma().particle_count(), 32);
        }
        assert_eq!(state.sigma().particle_count(), 32);
        state.validate().unwrap();
        assert_eq!(state.stats.m_coarse_accepted, state.stats.n_fine_proposed);
    }

    #[test]
    fn microcanonical_two_point_matches_enumeration() {
        // Exact conditional expectation of s(0) s(1) on the 4-particle
        // shell of the 8-ring versus a long two-level exchange run.
        let geom = chain_geom(8);
        let beta = 0.7;
        let h = benchmark_hamiltonian(&geom, 1.0, 2.0, 0.0, beta).unwrap();
        let mut wsum = 0.0;
        let mut csum = 0.0;
        for sigma in enumerate_configs(&geom).unwrap() {
            if sigma.particle_count() != 4 {
                continue;
            }
            let w = (-beta * h.energy(&sigma)).exp();
            wsum += w;
            csum += w * (sigma.get(0) * sigma.get(1)) as f64;
        }
        let exact = csum / wsum;

        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sigma = MicroConfig::random_with_count(&geom, 4, &mut rng).unwrap();
        let mut state = ChainState::with_coarse(sigma, cg, 1234);
        let mut samples = Vec::with_capacity(400_000);
        for _ in 0..400_000 {
            two_level_exchange_step(&mut state, &h, &hbar).unwrap();
            samples.push((state.sigma().get(0) * state.sigma().get(1)) as f64);
        }
        let (mean, se) = batch_mean_se(&samples, 50);
        assert!(
            (mean - exact).abs() < 3.5 * se,
            "mean {mean} exact {exact} se {se}"
        );
    }

    #[test]
    fn run_chain_is_deterministic() {
        let geom = chain_geom(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.5, 1.0).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::LongRangeOnly).unwrap();
        let mut cfg = SamplerConfig::new(Method::TwoLevel, 99);
        cfg.strategy = Strategy::Splitting;
        cfg.iterations = 5000;
        cfg.stride = 500;
        let a = run_chain(&cfg, &h, Some(&hbar), Some(&cg)).unwrap();
        let b = run_chain(&cfg, &h, Some(&hbar), Some(&cg)).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.rows.last().unwrap().step, 5000);

        let mut other = cfg;
        other.seed = 100;
        let c = run_chain(&other, &h, Some(&hbar), Some(&cg)).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn run_chain_requires_coarse_inputs() {
        let geom = chain_geom(8);
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.0, 1.0).unwrap();
        let cfg = SamplerConfig::new(Method::TwoLevel, 1);
        assert!(run_chain(&cfg, &h, None, None).is_err());
        let cfg = SamplerConfig::new(Method::Cgmc, 1);
        assert!(run_chain(&cfg, &h, None, None).is_err());
    }

    #[test]
    fn splitting_ops_match_scan_budget() {
        // Mean-field long range compresses exactly, so the fine stage only
        // ever scans the short range: coarse work n el cells per proposal,
        // short work (2S+1)^d per reconstruction, zero fine long work.
        let geom = chain_geom(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.5, 1.0).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::LongRangeOnly).unwrap();
        assert!(hbar.is_exact());
        let mut cfg = SamplerConfig::new(Method::TwoLevel, 7);
        cfg.strategy = Strategy::Splitting;
        cfg.iterations = 10_000;
        let run = run_chain(&cfg, &h, Some(&hbar), Some(&cg)).unwrap();
        let s = run.stats;
        assert_eq!(s.n_coarse_proposed, 10_000);
        assert_eq!(s.ops_coarse, s.n_coarse_proposed * 4);
        assert_eq!(s.ops_short, s.m_coarse_accepted * 3);
        assert_eq!(s.ops_long, 0);

        let mut mh_cfg = SamplerConfig::new(Method::Mh, 7);
        mh_cfg.iterations = 10_000;
        let run = run_chain(&mh_cfg, &h, None, None).unwrap();
        let s = run.stats;
        assert_eq!(s.ops_long, 10_000 * 16);
        assert_eq!(s.ops_short, 10_000 * 3);
        assert_eq!(s.ops_coarse, 0);
    }

    #[test]
    fn average_acceptance_rates() {
        let mut stats = AcceptanceStats::default();
        assert!(stats.average_acceptance().is_err());
        stats.n_coarse_proposed = 100;
        stats.m_coarse_accepted = 50;
        stats.n_fine_proposed = 50;
        stats.n_fine_accepted = 25;
        let (c, f, t) = stats.average_acceptance().unwrap();
        assert_abs_diff_eq!(c, 0.5);
        assert_abs_diff_eq!(f, 0.5);
        assert_abs_diff_eq!(t, 0.25);

        // At infinite temperature every stage accepts.
        let geom = chain_geom(8);
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.3, 0.0).unwrap();
        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let mut cfg = SamplerConfig::new(Method::TwoLevel, 5);
        cfg.iterations = 2000;
        let run = run_chain(&cfg, &h, Some(&hbar), Some(&cg)).unwrap();
        let (c, f, t) = run.stats.average_acceptance().unwrap();
        assert_eq!((c, f, t), (1.0, 1.0, 1.0));
    }

    #[test]
    fn correction_cutoff_requires_corrections_strategy() {
        let geom = chain_geom(16);
        let s = TwoLevelSettings::new(Strategy::Splitting, RejectionPolicy::Stay);
        assert!(s.with_correction_cutoff(&geom, 2.0).is_err());
        let s = TwoLevelSettings::new(Strategy::Corrections, RejectionPolicy::Stay);
        let s = s.with_correction_cutoff(&geom, 2.0).unwrap();
        assert_eq!(s.cutoff_pairs, 4);
    }

    #[test]
    fn truncated_corrections_chain_runs() {
        let geom = chain_geom(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 1.0, 6.0).unwrap();
        let h = Hamiltonian::new(
            crate::energy::Coupling::Single(Arc::new(pot)),
            Field::Constant(0.2),
            1.0,
        )
        .unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let mut cfg = SamplerConfig::new(Method::TwoLevel, 3);
        cfg.correction_cutoff = Some(4.0);
        cfg.iterations = 5000;
        cfg.stride = 1000;
        let run = run_chain(&cfg, &h, Some(&hbar), Some(&cg)).unwrap();
        assert_eq!(run.rows.len(), 5);
        match run.final_state {
            FinalState::Fine(state) => state.validate().unwrap(),
            FinalState::Coarse(_) => panic!("fine chain expected"),
        }
    }
}
