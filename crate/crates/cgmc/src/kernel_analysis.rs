//! Exact finite-size verification: dense transition kernels, stationary
//! measures, detailed-balance and stationarity residuals, spectral gaps,
//! and the acceptance-ratio factorization `K_CG = A * B * K_c` that
//! sandwiches the two-level gap between multiples of the fine gap.
//!
//! Everything here enumerates the state space, so sizes are capped. The
//! kernel builders replay the samplers' acceptance arithmetic through the
//! same shared helpers; that is what makes the checks binding, since the
//! verified kernel is exactly the simulated one.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::energy::{
    benchmark_hamiltonian, coarsen_hamiltonian, stable_sum, CoarseHamiltonian, CoarseLevel,
    Coupling, Hamiltonian,
};
use crate::exec;
use crate::lattice::{
    coarse_index, config_index, enumerate_coarse_configs, enumerate_configs, project,
    CoarseGeometry, LatticeGeometry, MicroConfig,
};
use crate::potentials::{Field, PairPotential};
use crate::samplers::{
    check_two_level_pairing, fine_flip_exponent, RejectionPolicy, Strategy, DIRS,
};
use crate::{Error, Result};

/// Upper site limit for dense single-flip kernels (2^N states).
pub const MAX_KERNEL_SITES: usize = 14;

/// Detailed-balance tolerance beyond which spectral analysis refuses to
/// symmetrize a kernel.
const DB_TOL: f64 = 1e-9;

/// Slack allowed on each side of the gap sandwich.
const SANDWICH_TOL: f64 = 1e-10;

/// `log(sum_i exp(w_i))` without overflow.
pub fn log_sum_exp(w: &[f64]) -> f64 {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let exps: Vec<f64> = w.iter().map(|&v| (v - m).exp()).collect();
    m + stable_sum(&exps).ln()
}

/// A probability vector over an enumerated state space. The state order is
/// whatever enumeration produced it; kernels and measures must be built
/// from the same enumeration to be comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureVector {
    p: Vec<f64>,
}

impl MeasureVector {
    /// Normalizes `exp(w_i)` into probabilities in the log domain, with a
    /// single normalization pass.
    pub fn from_log_weights(mut w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::argument("measure needs at least one state"));
        }
        let lse = log_sum_exp(&w);
        if !lse.is_finite() {
            return Err(Error::argument("log weights must normalize to a finite constant"));
        }
        for v in &mut w {
            *v = (*v - lse).exp();
        }
        Ok(Self { p: w })
    }

    /// Wraps an already normalized probability vector; the total may be off
    /// by at most 1e-9.
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::argument("measure needs at least one state"));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::argument("probabilities must be finite and nonnegative"));
        }
        let total = stable_sum(&p);
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::argument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { p })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.p[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn min_value(&self) -> f64 {
        self.p.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Expectation of a state function under this measure.
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        let terms: Vec<f64> = self.p.iter().enumerate().map(|(i, &w)| w * f(i)).collect();
        stable_sum(&terms)
    }
}

/// `(1/2) sum_i |a_i - b_i|`.
pub fn total_variation(a: &MeasureVector, b: &MeasureVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::argument("total variation needs measures on the same space"));
    }
    let diffs: Vec<f64> = a.p.iter().zip(&b.p).map(|(&x, &y)| (x - y).abs()).collect();
    Ok(0.5 * stable_sum(&diffs))
}

/// A dense row-stochastic transition matrix over an enumerated state space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKernel {
    k: DMatrix<f64>,
}

impl DenseKernel {
    /// Validates row-stochasticity (each row sums to 1 within 1e-12,
    /// entries nonnegative) and wraps the matrix.
    pub fn from_rows(k: DMatrix<f64>) -> Result<Self> {
        if k.nrows() != k.ncols() || k.nrows() == 0 {
            return Err(Error::argument("transition matrix must be square and nonempty"));
        }
        for i in 0..k.nrows() {
            let row: Vec<f64> = (0..k.ncols()).map(|j| k[(i, j)]).collect();
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::argument("transition probabilities must be nonnegative"));
            }
            let s = stable_sum(&row);
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::argument(format!(
                    "row {i} sums to {s}, not 1"
                )));
            }
        }
        Ok(Self { k })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.k[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }
}

/// Fills each diagonal entry with the rejected mass `1 - sum(off-diagonal)`
/// and validates the result.
fn finish_rows(mut m: DMatrix<f64>) -> Result<DenseKernel> {
    let n = m.nrows();
    for i in 0..n {
        let off: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).collect();
        let s = stable_sum(&off);
        if s > 1.0 + 1e-12 {
            return Err(Error::argument(format!(
                "off-diagonal mass of row {i} is {s} > 1"
            )));
        }
        m[(i, i)] = (1.0 - s).max(0.0);
    }
    DenseKernel::from_rows(m)
}

/// Acceptance probability `min(1, e^{-beta delta})`, with the same
/// certain-acceptance predicate as the samplers: a nonnegative exponent
/// accepts with probability exactly one.
fn accept_probability(beta: f64, delta: f64) -> f64 {
    let a = -beta * delta;
    if a >= 0.0 {
        1.0
    } else {
        a.exp()
    }
}

/// Exact Gibbs measure over all 2^N configurations, in bitmask order. The
/// Bernoulli-half site prior is uniform and cancels in the normalization.
pub fn exact_gibbs(h: &Hamiltonian) -> Result<MeasureVector> {
    let states = enumerate_configs(h.geometry())?;
    let w: Vec<f64> = states.iter().map(|s| -h.beta() * h.energy(s)).collect();
    MeasureVector::from_log_weights(w)
}

/// Exact Gibbs measure restricted to an explicit state list (for example a
/// fixed-particle-number shell, where the conditioned prior is again
/// uniform and cancels).
pub fn exact_gibbs_on(states: &[MicroConfig], h: &Hamiltonian) -> Result<MeasureVector> {
    let w: Vec<f64> = states.iter().map(|s| -h.beta() * h.energy(s)).collect();
    MeasureVector::from_log_weights(w)
}

/// `ln C(q, k)` for `k = 0..=q`.
fn ln_binomials(q: usize) -> Vec<f64> {
    let mut lnf = vec![0.0; q + 1];
    for i in 1..=q {
        lnf[i] = lnf[i - 1] + (i as f64).ln();
    }
    (0..=q).map(|k| lnf[q] - lnf[k] - lnf[q - k]).collect()
}

/// Exact coarse Gibbs measure over all (Q+1)^M block-count states, in
/// mixed-radix order: density `e^{-beta Hbar(eta)}` against the projected
/// prior, a product of binomial(Q, 1/2) cell weights.
pub fn exact_coarse_gibbs(
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
) -> Result<MeasureVector> {
    if hbar.geometry().sites() != cg.cells() {
        return Err(Error::argument("coarse Hamiltonian does not match the cell geometry"));
    }
    let states = enumerate_coarse_configs(cg)?;
    let lnb = ln_binomials(cg.cell_volume());
    let w: Vec<f64> = states
        .iter()
        .map(|eta| {
            let prior: Vec<f64> = (0..eta.cells()).map(|k| lnb[eta.get(k)]).collect();
            -hbar.beta() * hbar.energy(eta) + stable_sum(&prior)
        })
        .collect();
    MeasureVector::from_log_weights(w)
}

/// Pushforward of a fine measure under the block-spin projection. The input
/// must be indexed in bitmask order; the output is in mixed-radix order.
pub fn exact_marginal(mu: &MeasureVector, cg: &CoarseGeometry) -> Result<MeasureVector> {
    let states = enumerate_configs(cg.fine())?;
    if states.len() != mu.len() {
        return Err(Error::argument("measure does not match the fine state space"));
    }
    let cells = enumerate_coarse_configs(cg)?.len();
    let mut out = vec![0.0; cells];
    for (i, s) in states.iter().enumerate() {
        out[coarse_index(cg, &project(cg, s)) as usize] += mu.get(i);
    }
    MeasureVector::from_probs(out)
}

/// The product measure targeted by the approximate strategy: density
/// `e^{-beta [H_short(sigma) + Hbar_long(T sigma)]}` against the prior,
/// where the coarse part carries the cell-averaged field.
pub fn approximate_target(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
) -> Result<MeasureVector> {
    check_two_level_pairing(h, hbar, Strategy::ApproximateCg)?;
    check_cell_geometry(h, hbar, cg)?;
    let states = enumerate_configs(h.geometry())?;
    let mut w = Vec::with_capacity(states.len());
    for s in &states {
        let short = h.energy_split(s)?.short;
        let eta = project(cg, s);
        w.push(-h.beta() * (short + hbar.energy(&eta)));
    }
    MeasureVector::from_log_weights(w)
}

fn check_kernel_size(geom: &LatticeGeometry) -> Result<()> {
    if geom.sites() > MAX_KERNEL_SITES {
        return Err(Error::refused(format!(
            "dense kernel over 2^{} states (limit 2^{MAX_KERNEL_SITES})",
            geom.sites()
        )));
    }
    Ok(())
}

fn check_cell_geometry(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
) -> Result<()> {
    if cg.fine().sites() != h.geometry().sites() || hbar.geometry().sites() != cg.cells() {
        return Err(Error::argument("fine, coarse, and cell geometries disagree"));
    }
    Ok(())
}

/// Dense kernel of the single-site-flip Metropolis chain: propose a
/// uniform site, accept with `min(1, e^{-beta dH})`.
pub fn build_mh_kernel(h: &Hamiltonian) -> Result<DenseKernel> {
    let geom = h.geometry();
    check_kernel_size(geom)?;
    let n = geom.sites();
    let states = enumerate_configs(geom)?;
    let mut m = DMatrix::zeros(states.len(), states.len());
    for (i, s) in states.iter().enumerate() {
        for x in 0..n {
            let j = config_index(&s.flipped(x)) as usize;
            m[(i, j)] += accept_probability(h.beta(), h.delta_flip(s, x)) / n as f64;
        }
    }
    finish_rows(m)
}

/// Dense kernel of the two-level flip chain under the stay policy. The
/// coarse adsorb/desorb proposal times the uniform single-site
/// reconstruction lands on each flip target with probability exactly 1/N,
/// so an entry is `(1/N) alpha_CG alpha_f` with the fine exponent supplied
/// by the strategy. The retry policy conditions the coarse stage on
/// acceptance and is not this kernel, so it is refused.
pub fn build_two_level_kernel(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
    strategy: Strategy,
    policy: RejectionPolicy,
) -> Result<DenseKernel> {
    if policy == RejectionPolicy::Retry {
        return Err(Error::refused(
            "the retry policy conditions the coarse stage on acceptance; its kernel is not the two-stage product",
        ));
    }
    check_two_level_pairing(h, hbar, strategy)?;
    check_cell_geometry(h, hbar, cg)?;
    let geom = h.geometry();
    check_kernel_size(geom)?;
    let n = geom.sites();
    let beta = h.beta();
    let states = enumerate_configs(geom)?;
    let mut m = DMatrix::zeros(states.len(), states.len());
    for (i, s) in states.iter().enumerate() {
        let eta = project(cg, s);
        for x in 0..n {
            let k = cg.cell_of(x);
            let coarse_delta = if s.get(x) == 0 {
                hbar.delta_adsorb(&eta, k)
            } else {
                hbar.delta_desorb(&eta, k)
            };
            let fine_exp = fine_flip_exponent(h, hbar, strategy, s, x, coarse_delta)?;
            let alpha = accept_probability(beta, coarse_delta) * accept_probability(beta, fine_exp);
            let j = config_index(&s.flipped(x)) as usize;
            m[(i, j)] += alpha / n as f64;
        }
    }
    finish_rows(m)
}

/// Dense kernel of the coarse-only adsorb/desorb chain on block counts:
/// pick a cell uniformly, adsorb with probability `(Q - n_k)/Q` and desorb
/// with `n_k/Q`, accept with the coarse energy change.
pub fn build_cgmc_kernel(hbar: &CoarseHamiltonian, cg: &CoarseGeometry) -> Result<DenseKernel> {
    if hbar.geometry().sites() != cg.cells() {
        return Err(Error::argument("coarse Hamiltonian does not match the cell geometry"));
    }
    let states = enumerate_coarse_configs(cg)?;
    let (cells, q) = (cg.cells(), cg.cell_volume());
    let beta = hbar.beta();
    let mut m = DMatrix::zeros(states.len(), states.len());
    for (i, eta) in states.iter().enumerate() {
        for k in 0..cells {
            let nk = eta.get(k);
            if nk < q {
                let mut up = eta.clone();
                up.add(k, 1);
                let w = (q - nk) as f64 / q as f64 / cells as f64;
                let alpha = accept_probability(beta, hbar.delta_adsorb(eta, k));
                m[(i, coarse_index(cg, &up) as usize)] += w * alpha;
            }
            if nk > 0 {
                let mut down = eta.clone();
                down.add(k, -1);
                let w = nk as f64 / q as f64 / cells as f64;
                let alpha = accept_probability(beta, hbar.delta_desorb(eta, k));
                m[(i, coarse_index(cg, &down) as usize)] += w * alpha;
            }
        }
    }
    finish_rows(m)
}

/// All configurations with exactly `count` particles, in bitmask order.
pub fn coverage_shell(geom: &LatticeGeometry, count: usize) -> Result<Vec<MicroConfig>> {
    if count > geom.sites() {
        return Err(Error::argument("particle count exceeds the lattice size"));
    }
    Ok(enumerate_configs(geom)?
        .into_iter()
        .filter(|s| s.particle_count() == count)
        .collect())
}

/// Sorted bitmask ids of an explicit state list; the list must be sorted
/// and duplicate-free so targets can be found by binary search.
fn shell_ids(states: &[MicroConfig]) -> Result<Vec<u64>> {
    let ids: Vec<u64> = states.iter().map(config_index).collect();
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::argument("shell states must be sorted by bitmask and unique"));
    }
    Ok(ids)
}

fn shell_position(ids: &[u64], id: u64) -> Result<usize> {
    ids.binary_search(&id)
        .map_err(|_| Error::argument("exchange left the listed state space"))
}

/// Dense kernel of the plain nearest-neighbor exchange chain on an explicit
/// state list: pick a site and a lattice direction uniformly, swap the pair
/// if the occupations differ, accept with the full energy change.
pub fn build_kawasaki_kernel(h: &Hamiltonian, states: &[MicroConfig]) -> Result<DenseKernel> {
    let geom = h.geometry();
    let n = geom.sites();
    let dirs = 2 * geom.dim();
    let ids = shell_ids(states)?;
    let w = 1.0 / (n * dirs) as f64;
    let mut m = DMatrix::zeros(states.len(), states.len());
    for (i, s) in states.iter().enumerate() {
        for x in 0..n {
            for d in &DIRS[..dirs] {
                let y = geom.offset(x, d.0, d.1);
                if s.get(x) == s.get(y) {
                    continue;
                }
                let alpha = accept_probability(h.beta(), h.delta_exchange(s, x, y)?);
                let j = shell_position(&ids, config_index(&s.exchanged(x, y)?))?;
                m[(i, j)] += w * alpha;
            }
        }
    }
    finish_rows(m)
}

/// Dense kernel of the microcanonical two-level chain on an explicit state
/// list: an even mixture of the plain nearest-neighbor exchange and the
/// adjacent-cell particle transfer (proposal weight `n_k (Q - n_l)/Q^2`,
/// coarse test, uniform occupied/vacant reconstruction, exact remainder
/// test). The transfer deficit stays on the diagonal.
pub fn build_two_level_exchange_kernel(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
    states: &[MicroConfig],
) -> Result<DenseKernel> {
    if hbar.level() != CoarseLevel::FullInteraction {
        return Err(Error::config(
            "microcanonical two-level sampling compresses the full interaction",
        ));
    }
    if h.beta() != hbar.beta() {
        return Err(Error::config("fine and coarse levels disagree on the inverse temperature"));
    }
    check_cell_geometry(h, hbar, cg)?;
    let geom = h.geometry();
    let n = geom.sites();
    let dirs = 2 * geom.dim();
    let cells = cg.cells();
    if cells < 2 {
        return Err(Error::config("microcanonical two-level sampling needs at least two cells"));
    }
    let q = cg.cell_volume();
    let beta = h.beta();
    let ids = shell_ids(states)?;
    let w_fine = 0.5 / (n * dirs) as f64;
    let dirs_c = 2 * cg.coarse().dim();
    let mut m = DMatrix::zeros(states.len(), states.len());
    for (i, s) in states.iter().enumerate() {
        for x in 0..n {
            for d in &DIRS[..dirs] {
                let y = geom.offset(x, d.0, d.1);
                if s.get(x) == s.get(y) {
                    continue;
                }
                let alpha = accept_probability(beta, h.delta_exchange(s, x, y)?);
                let j = shell_position(&ids, config_index(&s.exchanged(x, y)?))?;
                m[(i, j)] += w_fine * alpha;
            }
        }
        let eta = project(cg, s);
        for k in 0..cells {
            for d in &DIRS[..dirs_c] {
                let l = cg.coarse().offset(k, d.0, d.1);
                let (nk, nl) = (eta.get(k), eta.get(l));
                if nk == 0 || nl == q {
                    continue;
                }
                let wt = (nk * (q - nl)) as f64 / (q * q) as f64;
                let coarse_delta = hbar.delta_move(&eta, k, l)?;
                let alpha_cg = accept_probability(beta, coarse_delta);
                let base = 0.5 / (cells * dirs_c) as f64 * wt * alpha_cg
                    / (nk as f64)
                    / ((q - nl) as f64);
                for &x in cg.sites_in(k) {
                    if s.get(x as usize) != 1 {
                        continue;
                    }
                    for &y in cg.sites_in(l) {
                        if s.get(y as usize) != 0 {
                            continue;
                        }
                        let fine_exp =
                            h.delta_exchange(s, x as usize, y as usize)? - coarse_delta;
                        let j = shell_position(
                            &ids,
                            config_index(&s.exchanged(x as usize, y as usize)?),
                        )?;
                        m[(i, j)] += base * accept_probability(beta, fine_exp);
                    }
                }
            }
        }
    }
    finish_rows(m)
}

/// Maximum detailed-balance violation `max_{i<j} |K_ij mu_i - K_ji mu_j|`.
pub fn check_detailed_balance(k: &DenseKernel, mu: &MeasureVector) -> Result<f64> {
    if k.dim() != mu.len() {
        return Err(Error::argument("kernel and measure live on different spaces"));
    }
    let n = k.dim();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (k.entry(i, j) * mu.get(i) - k.entry(j, i) * mu.get(j)).abs();
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

/// `|| mu K - mu ||_1`.
pub fn stationarity_residual(k: &DenseKernel, mu: &MeasureVector) -> Result<f64> {
    if k.dim() != mu.len() {
        return Err(Error::argument("kernel and measure live on different spaces"));
    }
    let n = k.dim();
    let mut res = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| mu.get(i) * k.entry(i, j)).collect();
        res.push((stable_sum(&col) - mu.get(j)).abs());
    }
    Ok(stable_sum(&res))
}

/// Similarity transform `D^{1/2} K D^{-1/2}` (symmetric when the chain is
/// reversible), explicitly symmetrized against rounding. Refuses kernels
/// whose detailed-balance violation exceeds an internal tolerance, and
/// measures with non-positive entries.
fn symmetrized(k: &DenseKernel, mu: &MeasureVector) -> Result<DMatrix<f64>> {
    let db = check_detailed_balance(k, mu)?;
    if db > DB_TOL {
        return Err(Error::refused(format!(
            "detailed-balance violation {db:.3e} exceeds {DB_TOL:.0e}; the spectrum of a non-reversible kernel is not what this routine computes"
        )));
    }
    if mu.min_value() <= 0.0 {
        return Err(Error::refused("the measure must be strictly positive to symmetrize"));
    }
    let n = k.dim();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = (mu.get(i) / mu.get(j)).sqrt() * k.entry(i, j);
        }
    }
    let st = s.transpose();
    Ok((s + st) * 0.5)
}

/// Full spectrum of the symmetrized kernel, sorted in descending order.
/// The leading eigenvalue must be 1 within 1e-8.
pub fn symmetrized_spectrum(k: &DenseKernel, mu: &MeasureVector) -> Result<Vec<f64>> {
    let s = symmetrized(k, mu)?;
    let eig = SymmetricEigen::new(s);
    let mut evs: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    evs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if (evs[0] - 1.0).abs() > 1e-8 {
        return Err(Error::refused(format!(
            "leading eigenvalue {} is not 1; kernel is not stochastic against this measure",
            evs[0]
        )));
    }
    Ok(evs)
}

/// Spectral gap `1 - lambda_2` of a reversible kernel.
pub fn spectral_gap(k: &DenseKernel, mu: &MeasureVector) -> Result<f64> {
    if k.dim() < 2 {
        return Err(Error::argument("spectral gap needs at least two states"));
    }
    let evs = symmetrized_spectrum(k, mu)?;
    Ok(1.0 - evs[1])
}

/// Dirichlet form `(1/2) sum_{i,j} (f_i - f_j)^2 K_ij mu_i`.
pub fn dirichlet_form(k: &DenseKernel, mu: &MeasureVector, f: &[f64]) -> Result<f64> {
    if k.dim() != mu.len() || f.len() != mu.len() {
        return Err(Error::argument("kernel, measure, and function must share a space"));
    }
    let n = k.dim();
    let mut terms = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let d = f[i] - f[j];
            terms.push(0.5 * d * d * k.entry(i, j) * mu.get(i));
        }
    }
    Ok(stable_sum(&terms))
}

/// Variance of `f` under `mu`.
pub fn measure_variance(mu: &MeasureVector, f: &[f64]) -> Result<f64> {
    if f.len() != mu.len() {
        return Err(Error::argument("measure and function must share a space"));
    }
    let mean = mu.expect(|i| f[i]);
    Ok(mu.expect(|i| {
        let d = f[i] - mean;
        d * d
    }))
}

/// Rayleigh quotient `E(f, f) / Var_mu(f)`; by the variational principle it
/// dominates the spectral gap for every non-constant `f`.
pub fn rayleigh_quotient(k: &DenseKernel, mu: &MeasureVector, f: &[f64]) -> Result<f64> {
    let var = measure_variance(mu, f)?;
    if var <= 0.0 {
        return Err(Error::argument("Rayleigh quotient needs a non-constant function"));
    }
    Ok(dirichlet_form(k, mu, f)? / var)
}

/// Geometric mixing bound and its exact certification.
#[derive(Debug, Clone, Copy)]
pub struct MixingBound {
    /// Spectral radius of the non-unit spectrum.
    pub lambda_tilde: f64,
    /// Smallest n with `lambda_tilde^n / (2 sqrt(min mu)) <= 1/4`.
    pub n_star: u64,
    /// First n at which the exact worst-case total variation distance
    /// `max_x TV(K^n(x, .), mu)` drops to 1/4; always at most `n_star`.
    pub tv_mixing_time: u64,
}

const MAX_POWER_STEPS: u64 = 200_000;

fn worst_case_tv(p: &DMatrix<f64>, mu: &MeasureVector) -> f64 {
    let n = p.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        let diffs: Vec<f64> = (0..n).map(|j| (p[(i, j)] - mu.get(j)).abs()).collect();
        worst = worst.max(0.5 * stable_sum(&diffs));
    }
    worst
}

/// Upper-bounds the mixing time of a reversible kernel from its spectrum
/// and certifies the bound by exact matrix powering. `lambda` is the
/// caller's spectral gap and must match the recomputed one.
pub fn mixing_time_bound(
    k: &DenseKernel,
    mu: &MeasureVector,
    lambda: f64,
) -> Result<MixingBound> {
    if lambda <= 0.0 || lambda >= 2.0 {
        return Err(Error::refused(format!(
            "spectral gap {lambda} outside (0, 2); the chain does not mix"
        )));
    }
    let evs = symmetrized_spectrum(k, mu)?;
    if evs.len() < 2 {
        return Err(Error::argument("mixing bound needs at least two states"));
    }
    if ((1.0 - lambda) - evs[1]).abs() > 1e-8 {
        return Err(Error::argument(format!(
            "supplied gap {lambda} disagrees with the spectrum (lambda_2 = {})",
            evs[1]
        )));
    }
    let lambda_tilde = evs[1..].iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    if lambda_tilde >= 1.0 {
        return Err(Error::refused(format!(
            "non-unit spectral radius {lambda_tilde} admits no geometric decay"
        )));
    }
    let n_star = if lambda_tilde == 0.0 {
        1
    } else {
        let target = mu.min_value().sqrt() / 2.0;
        (target.ln() / lambda_tilde.ln()).ceil().max(1.0) as u64
    };
    if n_star > MAX_POWER_STEPS {
        return Err(Error::refused(format!(
            "bound of {n_star} steps is too large to certify by matrix powering"
        )));
    }
    let mut p = k.matrix().clone();
    let mut tv_mixing_time = None;
    for step in 1..=n_star {
        if worst_case_tv(&p, mu) <= 0.25 {
            tv_mixing_time = Some(step);
            break;
        }
        if step < n_star {
            p = &p * k.matrix();
        }
    }
    let tv_mixing_time = tv_mixing_time.ok_or_else(|| {
        Error::refused("exact total variation distance exceeds 1/4 at the spectral bound")
    })?;
    Ok(MixingBound {
        lambda_tilde,
        n_star,
        tv_mixing_time,
    })
}

/// Which of the three acceptance tests (full fine, coarse, fine remainder)
/// are certain for a flip pair. Certainty of matched and mismatched shape:
/// either all three fire, or exactly the listed pair disagrees with the
/// full test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcceptanceClass {
    /// All three certain, or none.
    C1,
    /// Only the coarse test disagrees with the full one.
    C2,
    /// Only the fine remainder disagrees with the full one.
    C3,
    /// The full test disagrees with both stage tests; empty whenever the
    /// two stage exponents sum to the full one.
    C4,
}

/// Multiplier `A`, proposal-side ratio `B`, and acceptance class of one
/// flip pair, with `K_CG(sigma, sigma^x) = A * B * K_c(sigma, sigma^x)`.
#[derive(Debug, Clone, Copy)]
pub struct PairDecomposition {
    pub class: AcceptanceClass,
    pub a: f64,
    pub b: f64,
}

/// The two-stage proposal mass on a specific fine target: cell pick, move
/// weight, and uniform reconstruction among `picks` candidate sites.
fn composite_proposal(cells: usize, q: usize, picks: usize) -> f64 {
    (picks as f64 / q as f64 / cells as f64) * (1.0 / picks as f64)
}

/// Decomposes the two-level transition probability across a single flip
/// into the acceptance multiplier `A` (classified by which tests are
/// certain) and the proposal ratio `B` (forward composite over the flat
/// fine proposal when the remainder test is certain, reverse otherwise).
pub fn decompose_ab(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
    strategy: Strategy,
    sigma: &MicroConfig,
    x: usize,
) -> Result<PairDecomposition> {
    check_two_level_pairing(h, hbar, strategy)?;
    check_cell_geometry(h, hbar, cg)?;
    let beta = h.beta();
    let eta = project(cg, sigma);
    let k = cg.cell_of(x);
    let (cells, q, nk) = (cg.cells(), cg.cell_volume(), eta.get(k));
    let adsorb = sigma.get(x) == 0;
    let full_delta = h.delta_flip(sigma, x);
    let coarse_delta = if adsorb {
        hbar.delta_adsorb(&eta, k)
    } else {
        hbar.delta_desorb(&eta, k)
    };
    let fine_exp = fine_flip_exponent(h, hbar, strategy, sigma, x, coarse_delta)?;

    let certain = |d: f64| -beta * d >= 0.0;
    let ratio = |d: f64| (-beta * d).exp();
    let sym = |r: f64| r.min(1.0 / r);
    let (class, a) = match (certain(full_delta), certain(coarse_delta), certain(fine_exp)) {
        (true, true, true) | (false, false, false) => (AcceptanceClass::C1, 1.0),
        (true, false, true) | (false, true, false) => {
            (AcceptanceClass::C2, sym(ratio(coarse_delta)))
        }
        (true, true, false) | (false, false, true) => {
            (AcceptanceClass::C3, sym(ratio(fine_exp)))
        }
        (false, true, true) | (true, false, false) => {
            (AcceptanceClass::C4, sym(ratio(full_delta)))
        }
    };

    let forward = composite_proposal(cells, q, if adsorb { q - nk } else { nk });
    let reverse = composite_proposal(cells, q, if adsorb { nk + 1 } else { q - nk + 1 });
    let rho = 1.0 / (cells * q) as f64;
    let b = if certain(fine_exp) {
        forward / rho
    } else {
        reverse / rho
    };
    Ok(PairDecomposition { class, a, b })
}

/// Pairwise factorization data over every flip edge of the enumerated
/// state space.
#[derive(Debug, Clone)]
pub struct AbTable {
    /// `(row state, column state, decomposition)` per ordered flip pair.
    pub entries: Vec<(usize, usize, PairDecomposition)>,
    /// Smallest acceptance multiplier; always in (0, 1].
    pub a_inf: f64,
    /// Range of the proposal ratio `B`.
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Number of pairs in the class where the full test disagrees with
    /// both stages.
    pub c4_pairs: usize,
}

/// Runs [`decompose_ab`] over all ordered flip pairs.
pub fn decompose_all(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
    strategy: Strategy,
) -> Result<AbTable> {
    let geom = h.geometry();
    check_kernel_size(geom)?;
    let states = enumerate_configs(geom)?;
    let mut entries = Vec::with_capacity(states.len() * geom.sites());
    let (mut a_inf, mut gamma_lo, mut gamma_hi) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    let mut c4_pairs = 0;
    for (i, s) in states.iter().enumerate() {
        for x in 0..geom.sites() {
            let d = decompose_ab(h, hbar, cg, strategy, s, x)?;
            a_inf = a_inf.min(d.a);
            gamma_lo = gamma_lo.min(d.b);
            gamma_hi = gamma_hi.max(d.b);
            if d.class == AcceptanceClass::C4 {
                c4_pairs += 1;
            }
            entries.push((i, config_index(&s.flipped(x)) as usize, d));
        }
    }
    Ok(AbTable {
        entries,
        a_inf,
        gamma_lo,
        gamma_hi,
        c4_pairs,
    })
}

/// Maximum entrywise violation `|K_CG - A B K_c|` over the flip pairs of
/// the table. Diagonals absorb rejected mass and are not part of the
/// factorization.
pub fn verify_factorization(
    k_cg: &DenseKernel,
    k_c: &DenseKernel,
    table: &AbTable,
) -> Result<f64> {
    if k_cg.dim() != k_c.dim() {
        return Err(Error::argument("kernels live on different spaces"));
    }
    let mut worst = 0.0f64;
    for &(i, j, d) in &table.entries {
        if i >= k_cg.dim() || j >= k_cg.dim() {
            return Err(Error::argument("factorization table indexes outside the kernel"));
        }
        worst = worst.max((k_cg.entry(i, j) - d.a * d.b * k_c.entry(i, j)).abs());
    }
    Ok(worst)
}

/// One row of the verification summary: instance metadata, both spectral
/// gaps, and the factorization constants that sandwich them.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub n: usize,
    pub q: usize,
    pub beta: f64,
    /// Short-range (nearest-neighbor) coupling of the instance, 0 if none.
    pub k_short: f64,
    /// Long-range coupling amplitude of the instance.
    pub j_long: f64,
    pub lambda_c: f64,
    pub lambda_cg: f64,
    pub a_inf: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub sandwich_ok: bool,
}

pub const GAP_CSV_HEADER: &str =
    "N,q,beta,K,J,lambda_c,lambda_cg,a_inf,gamma_lo,gamma_hi,sandwich_ok";

impl GapReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.q,
            self.beta,
            self.k_short,
            self.j_long,
            self.lambda_c,
            self.lambda_cg,
            self.a_inf,
            self.gamma_lo,
            self.gamma_hi,
            self.sandwich_ok
        )
    }
}

/// Serializes gap reports with a fixed header.
pub fn gap_report_csv(reports: &[GapReport]) -> String {
    let mut out = String::from(GAP_CSV_HEADER);
    for r in reports {
        out.push('\n');
        out.push_str(&r.csv_row());
    }
    out.push('\n');
    out
}

/// Asserts `A_inf gamma_lo lambda_c <= lambda_CG <= gamma_hi lambda_c` with
/// 1e-10 slack on each side; a violation reports all offending values.
pub fn verify_gap_sandwich(r: &GapReport) -> Result<()> {
    let lo = r.a_inf * r.gamma_lo * r.lambda_c;
    let hi = r.gamma_hi * r.lambda_c;
    if r.lambda_cg + SANDWICH_TOL < lo || r.lambda_cg > hi + SANDWICH_TOL {
        return Err(Error::refused(format!(
            "gap sandwich violated: {lo} <= {} <= {hi} fails (A_inf {}, gamma [{}, {}], lambda_c {})",
            r.lambda_cg, r.a_inf, r.gamma_lo, r.gamma_hi, r.lambda_c
        )));
    }
    Ok(())
}

/// Relative entropy per site, `(1/N) sum_i mu0_i ln(mu0_i / mu_i)`.
/// Refuses measures with non-positive entries.
pub fn relative_entropy_specific(
    mu0: &MeasureVector,
    mu: &MeasureVector,
    sites: usize,
) -> Result<f64> {
    if mu0.len() != mu.len() {
        return Err(Error::argument("relative entropy needs measures on the same space"));
    }
    if sites == 0 {
        return Err(Error::argument("relative entropy needs a positive site count"));
    }
    if mu0.min_value() <= 0.0 || mu.min_value() <= 0.0 {
        return Err(Error::refused(
            "relative entropy needs strictly positive measures",
        ));
    }
    let terms: Vec<f64> = mu0
        .as_slice()
        .iter()
        .zip(mu.as_slice())
        .map(|(&p, &r)| p * (p / r).ln())
        .collect();
    Ok(stable_sum(&terms) / sites as f64)
}

/// Extra checks run on instances whose coupling splits into a
/// nearest-neighbor and a mean-field part.
#[derive(Debug, Clone)]
pub struct SplittingChecks {
    pub db: f64,
    pub factorization: f64,
    /// Largest departure of the proposal ratio from 1.
    pub b_dev: f64,
    pub c4_pairs: usize,
    /// Detailed balance of the approximate kernel against its own product
    /// target.
    pub db_approximate: f64,
}

/// All exact checks for one verification instance.
#[derive(Debug, Clone)]
pub struct InstanceReport {
    pub label: String,
    pub db_fine: f64,
    pub db_coarse: f64,
    pub db_two_level: f64,
    pub stationarity_two_level: f64,
    pub factorization: f64,
    pub b_dev: f64,
    pub c4_pairs: usize,
    pub splitting: Option<SplittingChecks>,
    pub gaps: GapReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InstanceKind {
    Benchmark,
    KacSmooth,
}

#[derive(Debug, Clone, Copy)]
struct InstanceSpec {
    kind: InstanceKind,
    n: usize,
    q: usize,
    beta: f64,
}

fn instance_hamiltonian(spec: &InstanceSpec, geom: &LatticeGeometry) -> Result<(Hamiltonian, f64, f64)> {
    match spec.kind {
        InstanceKind::Benchmark => {
            let (k, j, field) = (1.0, 5.0, 1.0);
            Ok((benchmark_hamiltonian(geom, k, j, field, spec.beta)?, k, j))
        }
        InstanceKind::KacSmooth => {
            let j0 = 1.0;
            let pot = PairPotential::kac_smooth(geom, j0, (spec.n / 2) as f64)?;
            let h = Hamiltonian::new(
                Coupling::Single(Arc::new(pot)),
                Field::Constant(1.0),
                spec.beta,
            )?;
            Ok((h, 0.0, j0))
        }
    }
}

fn run_instance(spec: InstanceSpec) -> Result<InstanceReport> {
    let geom = LatticeGeometry::new(1, spec.n)?;
    let cg = CoarseGeometry::new(&geom, spec.q)?;
    let (h, k_short, j_long) = instance_hamiltonian(&spec, &geom)?;

    let mu = exact_gibbs(&h)?;
    let k_c = build_mh_kernel(&h)?;
    let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction)?;
    let k_cg = build_two_level_kernel(&h, &hbar, &cg, Strategy::Corrections, RejectionPolicy::Stay)?;
    let mu_bar = exact_coarse_gibbs(&hbar, &cg)?;
    let k_coarse = build_cgmc_kernel(&hbar, &cg)?;

    let db_fine = check_detailed_balance(&k_c, &mu)?;
    let db_two_level = check_detailed_balance(&k_cg, &mu)?;
    let db_coarse = check_detailed_balance(&k_coarse, &mu_bar)?;
    let stationarity_two_level = stationarity_residual(&k_cg, &mu)?;

    let table = decompose_all(&h, &hbar, &cg, Strategy::Corrections)?;
    let factorization = verify_factorization(&k_cg, &k_c, &table)?;
    let b_dev = (table.gamma_hi - 1.0).abs().max((table.gamma_lo - 1.0).abs());

    let lambda_c = spectral_gap(&k_c, &mu)?;
    let lambda_cg = spectral_gap(&k_cg, &mu)?;
    let mut gaps = GapReport {
        n: spec.n,
        q: spec.q,
        beta: spec.beta,
        k_short,
        j_long,
        lambda_c,
        lambda_cg,
        a_inf: table.a_inf,
        gamma_lo: table.gamma_lo,
        gamma_hi: table.gamma_hi,
        sandwich_ok: false,
    };
    gaps.sandwich_ok = verify_gap_sandwich(&gaps).is_ok();

    let splitting = if spec.kind == InstanceKind::Benchmark {
        let hbar_long = coarsen_hamiltonian(&h, &cg, CoarseLevel::LongRangeOnly)?;
        let k_split =
            build_two_level_kernel(&h, &hbar_long, &cg, Strategy::Splitting, RejectionPolicy::Stay)?;
        let split_table = decompose_all(&h, &hbar_long, &cg, Strategy::Splitting)?;
        let k_approx = build_two_level_kernel(
            &h,
            &hbar_long,
            &cg,
            Strategy::ApproximateCg,
            RejectionPolicy::Stay,
        )?;
        let target = approximate_target(&h, &hbar_long, &cg)?;
        Some(SplittingChecks {
            db: check_detailed_balance(&k_split, &mu)?,
            factorization: verify_factorization(&k_split, &k_c, &split_table)?,
            b_dev: (split_table.gamma_hi - 1.0)
                .abs()
                .max((split_table.gamma_lo - 1.0).abs()),
            c4_pairs: split_table.c4_pairs,
            db_approximate: check_detailed_balance(&k_approx, &target)?,
        })
    } else {
        None
    };

    let kind = match spec.kind {
        InstanceKind::Benchmark => "benchmark",
        InstanceKind::KacSmooth => "kac-smooth",
    };
    Ok(InstanceReport {
        label: format!("{kind} N={} q={} beta={}", spec.n, spec.q, spec.beta),
        db_fine,
        db_coarse,
        db_two_level,
        stationarity_two_level,
        factorization,
        b_dev,
        c4_pairs: table.c4_pairs,
        splitting,
        gaps,
    })
}

/// Runs the full exact-verification matrix: sizes {4, 6, 8} x blocks
/// {1, 2} x {benchmark, smooth Kac} x inverse temperatures {0.2, 1}, all
/// in parallel. Each instance checks detailed balance of the fine, coarse,
/// and two-level kernels, stationarity, the A*B factorization, and the gap
/// sandwich.
pub fn run_verification_matrix() -> Result<Vec<InstanceReport>> {
    let mut specs = Vec::new();
    for &n in &[4usize, 6, 8] {
        for &q in &[1usize, 2] {
            for &kind in &[InstanceKind::Benchmark, InstanceKind::KacSmooth] {
                for &beta in &[0.2, 1.0] {
                    specs.push(InstanceSpec { kind, n, q, beta });
                }
            }
        }
    }
    exec::par_map(specs, run_instance).into_iter().collect()
}
