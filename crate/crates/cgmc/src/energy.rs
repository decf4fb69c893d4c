//! Hamiltonians and single-move energy differences on both levels.
//!
//! Fine level: `H(sigma) = -1/2 sum_{x != y} J(x-y) sigma(x) sigma(y)
//!                        + sum_x h(x) sigma(x)`.
//! Coarse level, for block counts eta with cell coupling Jbar and
//! within-cell mean coupling `diag`:
//! `Hbar(eta) = -1/2 sum_{k != l} Jbar(k,l) eta(k) eta(l)
//!             - diag/2 sum_k eta(k) (eta(k) - 1) + sum_k hbar(k) eta(k)`.
//!
//! Delta functions return exactly `H(moved) - H(current)` (tested against
//! full recomputation) while scanning only the interaction neighborhood.

use std::sync::Arc;

use crate::lattice::{CoarseConfig, CoarseGeometry, LatticeGeometry, MicroConfig};
use crate::potentials::{coarsen, CoarsePotential, Field, PairPotential, ScanEntry, SplitPotential};
use crate::{Error, Result};

/// Pair interaction of a Hamiltonian: either one potential or a
/// short-range/long-range split (required by the two-level strategies that
/// treat the two ranges differently).
#[derive(Debug, Clone)]
pub enum Coupling {
    Single(Arc<PairPotential>),
    Split(Arc<SplitPotential>),
}

impl Coupling {
    pub fn geometry(&self) -> &LatticeGeometry {
        match self {
            Coupling::Single(p) => p.geometry(),
            Coupling::Split(s) => s.short().geometry(),
        }
    }

    pub fn split(&self) -> Option<&SplitPotential> {
        match self {
            Coupling::Single(_) => None,
            Coupling::Split(s) => Some(s),
        }
    }

    /// Neighborhood sites visited when evaluating the long-range (or only)
    /// part of one local field.
    pub fn long_trips(&self) -> u64 {
        match self {
            Coupling::Single(p) => p.scan_trips(),
            Coupling::Split(s) => s.long().scan_trips(),
        }
    }

    /// Neighborhood sites visited for the short-range part (0 if unsplit).
    pub fn short_trips(&self) -> u64 {
        match self {
            Coupling::Single(_) => 0,
            Coupling::Split(s) => s.short().scan_trips(),
        }
    }
}

/// Pairwise summation: rounding error grows logarithmically in the term
/// count instead of linearly, which matters for large-lattice energies.
pub fn stable_sum(terms: &[f64]) -> f64 {
    if terms.len() <= 64 {
        return terms.iter().sum();
    }
    let mid = terms.len() / 2;
    stable_sum(&terms[..mid]) + stable_sum(&terms[mid..])
}

fn local_field(geom: &LatticeGeometry, scan: &[ScanEntry], sigma: &MicroConfig, x: usize) -> f64 {
    let n = geom.side();
    let (xc, xr) = (x % n, x / n);
    let spins = sigma.spins();
    let mut acc = 0.0;
    for e in scan {
        let mut c = xc + e.dx as usize;
        if c >= n {
            c -= n;
        }
        let mut r = xr + e.dy as usize;
        if r >= n {
            r -= n;
        }
        acc += e.j * spins[r * n + c] as f64;
    }
    acc
}

/// Fine-level Hamiltonian: pair coupling, external field, inverse
/// temperature. Immutable; field sweeps rebind with [`with_field`].
///
/// [`with_field`]: Hamiltonian::with_field
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    coupling: Coupling,
    field: Field,
    beta: f64,
}

/// Pair energy of a split coupling, by range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    pub short: f64,
    pub long: f64,
}

impl Hamiltonian {
    pub fn new(coupling: Coupling, field: Field, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::config(format!("inverse temperature must be >= 0, got {beta}")));
        }
        if let Field::PerSite(v) = &field {
            if v.len() != coupling.geometry().sites() {
                return Err(Error::config("per-site field length != lattice size"));
            }
        }
        Ok(Hamiltonian {
            coupling,
            field,
            beta,
        })
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        self.coupling.geometry()
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Same interaction and temperature under a different external field.
    pub fn with_field(&self, field: Field) -> Result<Self> {
        Hamiltonian::new(self.coupling.clone(), field, self.beta)
    }

    fn pair_local(&self, sigma: &MicroConfig, x: usize) -> f64 {
        let geom = self.geometry();
        match &self.coupling {
            Coupling::Single(p) => local_field(geom, p.scan(), sigma, x),
            Coupling::Split(s) => {
                local_field(geom, s.short().scan(), sigma, x)
                    + local_field(geom, s.long().scan(), sigma, x)
            }
        }
    }

    /// Full energy by neighborhood scan, `O(N * trips)`.
    pub fn energy(&self, sigma: &MicroConfig) -> f64 {
        let geom = self.geometry();
        let terms: Vec<f64> = (0..geom.sites())
            .map(|x| {
                let s = sigma.get(x) as f64;
                s * (self.field.at(x) - 0.5 * self.pair_local(sigma, x))
            })
            .collect();
        stable_sum(&terms)
    }

    /// Short/long pair energies of a split coupling; their sum plus the
    /// field term is [`energy`](Self::energy).
    pub fn energy_split(&self, sigma: &MicroConfig) -> Result<EnergySplit> {
        let split = self
            .coupling
            .split()
            .ok_or_else(|| Error::argument("energy_split needs a split coupling"))?;
        let geom = self.geometry();
        let mut short_terms = Vec::with_capacity(geom.sites());
        let mut long_terms = Vec::with_capacity(geom.sites());
        for x in 0..geom.sites() {
            let s = sigma.get(x) as f64;
            short_terms.push(-0.5 * s * local_field(geom, split.short().scan(), sigma, x));
            long_terms.push(-0.5 * s * local_field(geom, split.long().scan(), sigma, x));
        }
        Ok(EnergySplit {
            short: stable_sum(&short_terms),
            long: stable_sum(&long_terms),
        })
    }

    /// `H(sigma^x) - H(sigma)` for a single-site flip.
    pub fn delta_flip(&self, sigma: &MicroConfig, x: usize) -> f64 {
        let s = sigma.get(x) as f64;
        (2.0 * s - 1.0) * self.pair_local(sigma, x) + (1.0 - 2.0 * s) * self.field.at(x)
    }

    /// Short-range pair part of [`delta_flip`](Self::delta_flip), without
    /// the field term. Strategies that handle the long range and the field
    /// on the coarse level test against exactly this quantity.
    pub fn delta_flip_short(&self, sigma: &MicroConfig, x: usize) -> Result<f64> {
        let split = self
            .coupling
            .split()
            .ok_or_else(|| Error::argument("delta_flip_short needs a split coupling"))?;
        let s = sigma.get(x) as f64;
        Ok((2.0 * s - 1.0) * local_field(self.geometry(), split.short().scan(), sigma, x))
    }

    /// `H(sigma^{xy}) - H(sigma)` for an exchange of two distinct sites.
    /// Zero when the occupations agree.
    pub fn delta_exchange(&self, sigma: &MicroConfig, x: usize, y: usize) -> Result<f64> {
        if x == y {
            return Err(Error::argument("exchange sites must be distinct"));
        }
        let a = sigma.get(x) as f64;
        let b = sigma.get(y) as f64;
        if a == b {
            return Ok(0.0);
        }
        let jxy = match &self.coupling {
            Coupling::Single(p) => p.between(x, y),
            Coupling::Split(s) => s.short().between(x, y) + s.long().between(x, y),
        };
        let lx = self.pair_local(sigma, x);
        let ly = self.pair_local(sigma, y);
        Ok((a - b) * (lx - ly + (a - b) * jxy + self.field.at(y) - self.field.at(x)))
    }

    /// Short-range pair part of [`delta_exchange`](Self::delta_exchange),
    /// without field terms.
    pub fn delta_exchange_short(&self, sigma: &MicroConfig, x: usize, y: usize) -> Result<f64> {
        let split = self
            .coupling
            .split()
            .ok_or_else(|| Error::argument("delta_exchange_short needs a split coupling"))?;
        if x == y {
            return Err(Error::argument("exchange sites must be distinct"));
        }
        let a = sigma.get(x) as f64;
        let b = sigma.get(y) as f64;
        if a == b {
            return Ok(0.0);
        }
        let geom = self.geometry();
        let lx = local_field(geom, split.short().scan(), sigma, x);
        let ly = local_field(geom, split.short().scan(), sigma, y);
        Ok((a - b) * (lx - ly + (a - b) * split.short().between(x, y)))
    }
}

/// Which part of the fine interaction the coarse level compresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseLevel {
    /// Block-average the whole pair interaction.
    FullInteraction,
    /// Block-average only the long-range part of a split coupling; the
    /// short range stays a fine-level responsibility.
    LongRangeOnly,
}

/// Coarse-level Hamiltonian over block counts. Records which part of the
/// fine interaction it compresses so samplers can reject a mismatched
/// strategy/Hamiltonian pairing.
#[derive(Debug, Clone)]
pub struct CoarseHamiltonian {
    pot: Arc<CoarsePotential>,
    beta: f64,
    level: CoarseLevel,
}

/// Block-averages the requested part of `h` onto the cells of `cg`,
/// carrying the cell-averaged field and the inverse temperature along.
pub fn coarsen_hamiltonian(h: &Hamiltonian, cg: &CoarseGeometry, level: CoarseLevel) -> Result<CoarseHamiltonian> {
    let pot = match (level, &h.coupling) {
        (CoarseLevel::FullInteraction, Coupling::Single(p)) => coarsen(p, cg, h.field())?,
        (CoarseLevel::FullInteraction, Coupling::Split(s)) => {
            let total = s.total()?;
            coarsen(&total, cg, h.field())?
        }
        (CoarseLevel::LongRangeOnly, Coupling::Split(s)) => coarsen(s.long(), cg, h.field())?,
        (CoarseLevel::LongRangeOnly, Coupling::Single(_)) => {
            return Err(Error::argument(
                "long-range-only coarsening needs a split coupling",
            ))
        }
    };
    Ok(CoarseHamiltonian {
        pot: Arc::new(pot),
        beta: h.beta,
        level,
    })
}

impl CoarseHamiltonian {
    pub fn new(pot: Arc<CoarsePotential>, beta: f64, level: CoarseLevel) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::config("inverse temperature must be >= 0"));
        }
        Ok(CoarseHamiltonian { pot, beta, level })
    }

    pub fn level(&self) -> CoarseLevel {
        self.level
    }

    pub fn potential(&self) -> &CoarsePotential {
        &self.pot
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        self.pot.coarse_geometry()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// True when the compression reproduces fine energy differences exactly
    /// (mean-field coupling, or q = 1).
    pub fn is_exact(&self) -> bool {
        self.pot.is_exact()
    }

    /// Same interaction with the coarse field rebuilt from `field`.
    pub fn with_field(&self, cg: &CoarseGeometry, field: &Field) -> Self {
        CoarseHamiltonian {
            pot: Arc::new(self.pot.with_field(cg, field)),
            beta: self.beta,
            level: self.level,
        }
    }

    fn cell_local(&self, eta: &CoarseConfig, k: usize) -> f64 {
        let geom = self.pot.coarse_geometry();
        let n = geom.side();
        let (kc, kr) = (k % n, k / n);
        let mut acc = 0.0;
        for e in self.pot.scan() {
            let mut c = kc + e.dx as usize;
            if c >= n {
                c -= n;
            }
            let mut r = kr + e.dy as usize;
            if r >= n {
                r -= n;
            }
            acc += e.j * eta.get(r * n + c) as f64;
        }
        acc
    }

    pub fn energy(&self, eta: &CoarseConfig) -> f64 {
        let m = self.geometry().sites();
        debug_assert_eq!(eta.cells(), m);
        let diag = self.pot.diag();
        let terms: Vec<f64> = (0..m)
            .map(|k| {
                let nk = eta.get(k) as f64;
                -0.5 * nk * self.cell_local(eta, k) - 0.5 * diag * nk * (nk - 1.0)
                    + self.pot.hbar(k) * nk
            })
            .collect();
        stable_sum(&terms)
    }

    /// `Hbar(eta + e_k) - Hbar(eta)`.
    pub fn delta_adsorb(&self, eta: &CoarseConfig, k: usize) -> f64 {
        -(self.cell_local(eta, k) + self.pot.diag() * eta.get(k) as f64) + self.pot.hbar(k)
    }

    /// `Hbar(eta - e_k) - Hbar(eta)`.
    pub fn delta_desorb(&self, eta: &CoarseConfig, k: usize) -> f64 {
        self.cell_local(eta, k) + self.pot.diag() * (eta.get(k) as f64 - 1.0) - self.pot.hbar(k)
    }

    /// `Hbar(eta - e_from + e_to) - Hbar(eta)` for distinct cells.
    pub fn delta_move(&self, eta: &CoarseConfig, from: usize, to: usize) -> Result<f64> {
        if from == to {
            return Err(Error::argument("particle move needs distinct cells"));
        }
        let d_out = self.delta_desorb(eta, from);
        // Adsorption local field evaluated after the desorption: subtract the
        // coupling to the removed particle.
        let jft = if self.geometry().sites() > 1 {
            self.pot.between_cells(to, from)
        } else {
            0.0
        };
        let d_in = -(self.cell_local(eta, to) - jft + self.pot.diag() * eta.get(to) as f64)
            + self.pot.hbar(to);
        Ok(d_out + d_in)
    }

    /// Cells visited per coarse local-field evaluation.
    pub fn scan_trips(&self) -> u64 {
        self.pot.scan_trips()
    }
}

/// The two-level mismatch for a single flip:
/// `[H(sigma^x) - H(sigma)] - [Hbar(eta') - Hbar(eta)]`, where the block
/// move matching the flip adds or removes one particle in x's cell.
///
/// `truncate` restricts the pair sum to `|x - y| <= l_c`; `None` evaluates
/// the exact difference of the two delta functions.
pub fn delta_correction(
    h: &Hamiltonian,
    hbar: &CoarseHamiltonian,
    cg: &CoarseGeometry,
    sigma: &MicroConfig,
    eta: &CoarseConfig,
    x: usize,
    truncate: Option<f64>,
) -> f64 {
    let k = cg.cell_of(x);
    match truncate {
        None => {
            let coarse = if sigma.get(x) == 0 {
                hbar.delta_adsorb(eta, k)
            } else {
                hbar.delta_desorb(eta, k)
            };
            h.delta_flip(sigma, x) - coarse
        }
        Some(l_c) => {
            let geom = h.geometry();
            let s = sigma.get(x) as f64;
            let cpot = hbar.potential();
            let mut acc = 0.0;
            for y in 0..geom.sites() {
                if y == x || geom.distance(x, y) > l_c {
                    continue;
                }
                let j = match h.coupling() {
                    Coupling::Single(p) => p.between(x, y),
                    Coupling::Split(sp) => sp.short().between(x, y) + sp.long().between(x, y),
                };
                let l = cg.cell_of(y);
                let jbar = if l == k { cpot.diag() } else { cpot.between_cells(k, l) };
                acc += (j - jbar) * sigma.get(y) as f64;
            }
            let field_gap = h.field().at(x) - cpot.hbar(k);
            (2.0 * s - 1.0) * acc + (1.0 - 2.0 * s) * field_gap
        }
    }
}

/// The reference model: nearest-neighbor coupling `k` plus mean-field
/// coupling `j/N`, uniform field `h`, at inverse temperature `beta`. The
/// short/long split at range 1 is built in.
pub fn benchmark_hamiltonian(
    geom: &LatticeGeometry,
    k: f64,
    j: f64,
    h: f64,
    beta: f64,
) -> Result<Hamiltonian> {
    let nn = PairPotential::nearest_neighbor(geom, k)?;
    let cw = PairPotential::curie_weiss(geom, j)?;
    let split = SplitPotential::from_parts(nn, cw)?;
    Hamiltonian::new(
        Coupling::Split(Arc::new(split)),
        Field::Constant(h),
        beta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::project;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> LatticeGeometry {
        LatticeGeometry::new(1, n).unwrap()
    }

    fn single(pot: PairPotential, h: f64, beta: f64) -> Hamiltonian {
        Hamiltonian::new(Coupling::Single(Arc::new(pot)), Field::Constant(h), beta).unwrap()
    }

    /// Oracle: the raw double sum over ordered site pairs.
    fn energy_brute(pot: &PairPotential, field: &Field, sigma: &MicroConfig) -> f64 {
        let n = pot.geometry().sites();
        let mut e = 0.0;
        for x in 0..n {
            for y in 0..n {
                if x != y {
                    e -= 0.5 * pot.between(x, y) * (sigma.get(x) * sigma.get(y)) as f64;
                }
            }
            e += field.at(x) * sigma.get(x) as f64;
        }
        e
    }

    #[test]
    fn ring_energy_by_hand() {
        // Four-site ring, nearest-neighbor coupling K: sigma = 1100 has one
        // occupied bond, H = -K; the field adds h per particle.
        let geom = chain(4);
        let h = single(PairPotential::nearest_neighbor(&geom, 1.0).unwrap(), 0.25, 1.0);
        let sigma = MicroConfig::from_spins(vec![1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(h.energy(&sigma), -1.0 + 0.5, epsilon = 1e-15);

        let full = MicroConfig::from_spins(vec![1, 1, 1, 1]).unwrap();
        assert_abs_diff_eq!(h.energy(&full), -4.0 + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn curie_weiss_closed_form() {
        let geom = chain(10);
        let j = 3.0;
        let h = single(PairPotential::curie_weiss(&geom, j).unwrap(), -0.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            let s = sigma.particle_count() as f64;
            let expect = -0.5 * j / 10.0 * (s * s - s) - 0.5 * s;
            assert_abs_diff_eq!(h.energy(&sigma), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_matches_brute_force() {
        let geom = LatticeGeometry::new(2, 6).unwrap();
        let pot = PairPotential::morse_gaussian(&geom, 1.1, 1.8, 3.0, 0.3, 3.0).unwrap();
        let field = Field::PerSite((0..36).map(|i| (i as f64 * 0.37).sin()).collect());
        let h = Hamiltonian::new(Coupling::Single(Arc::new(pot.clone())), field.clone(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            assert_abs_diff_eq!(
                h.energy(&sigma),
                energy_brute(&pot, &field, &sigma),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn split_energies_recombine() {
        let geom = chain(12);
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, 0.3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = MicroConfig::random(&geom, &mut rng);
        let parts = h.energy_split(&sigma).unwrap();
        let field_term = 0.3 * sigma.particle_count() as f64;
        assert_abs_diff_eq!(
            parts.short + parts.long + field_term,
            h.energy(&sigma),
            epsilon = 1e-12
        );

        let unsplit = single(PairPotential::curie_weiss(&geom, 1.0).unwrap(), 0.0, 1.0);
        assert!(unsplit.energy_split(&sigma).is_err());
        assert!(unsplit.delta_flip_short(&sigma, 0).is_err());
    }

    #[test]
    fn flip_delta_equals_energy_difference() {
        let geom = LatticeGeometry::new(2, 4).unwrap();
        let h = benchmark_hamiltonian(&geom, 1.0, 5.0, -0.7, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..25 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            let x = rand::Rng::gen_range(&mut rng, 0..16);
            let expect = h.energy(&sigma.flipped(x)) - h.energy(&sigma);
            assert_abs_diff_eq!(h.delta_flip(&sigma, x), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn exchange_delta_equals_energy_difference() {
        let geom = LatticeGeometry::new(2, 6).unwrap();
        let pot = PairPotential::morse_gaussian(&geom, 0.9, 2.0, 4.0, 0.2, 5.0).unwrap();
        let field = Field::PerSite((0..36).map(|i| (i as f64 * 0.11).cos()).collect());
        let h = Hamiltonian::new(Coupling::Single(Arc::new(pot)), field, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            let x = rand::Rng::gen_range(&mut rng, 0..36);
            let mut y = rand::Rng::gen_range(&mut rng, 0..36);
            if y == x {
                y = (y + 1) % 36;
            }
            let expect = h.energy(&sigma.exchanged(x, y).unwrap()) - h.energy(&sigma);
            assert_abs_diff_eq!(h.delta_exchange(&sigma, x, y).unwrap(), expect, epsilon = 1e-12);
        }
        assert!(h.delta_exchange(&MicroConfig::empty(&geom), 3, 3).is_err());
    }

    #[test]
    fn coarse_energy_matches_definition() {
        let geom = chain(12);
        let cg = CoarseGeometry::new(&geom, 3).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 2.0, 4.0).unwrap();
        let h = Hamiltonian::new(Coupling::Single(Arc::new(pot.clone())), Field::Constant(0.2), 1.0).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();
        let cpot = coarsen(&pot, &cg, &Field::Constant(0.2)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            let eta = project(&cg, &sigma);
            // Oracle: the definition, cell pair by cell pair.
            let m = cg.cells();
            let mut expect = 0.0;
            for k in 0..m {
                for l in 0..m {
                    if k != l {
                        expect -= 0.5 * cpot.between_cells(k, l) * (eta.get(k) * eta.get(l)) as f64;
                    }
                }
                let nk = eta.get(k) as f64;
                expect -= 0.5 * cpot.diag() * nk * (nk - 1.0);
                expect += 0.2 * nk;
            }
            assert_abs_diff_eq!(hbar.energy(&eta), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn coarse_deltas_match_energy_differences() {
        let geom = chain(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let pot = PairPotential::kac_algebraic(&geom, 3.0).unwrap();
        let h = Hamiltonian::new(Coupling::Single(Arc::new(pot)), Field::Constant(-0.4), 1.0).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let sigma = MicroConfig::random(&geom, &mut rng);
            let eta = project(&cg, &sigma);
            for k in 0..cg.cells() {
                if eta.get(k) < cg.cell_volume() {
                    let mut up = eta.clone();
                    up.add(k, 1);
                    assert_abs_diff_eq!(
                        hbar.delta_adsorb(&eta, k),
                        hbar.energy(&up) - hbar.energy(&eta),
                        epsilon = 1e-12
                    );
                }
                if eta.get(k) > 0 {
                    let mut down = eta.clone();
                    down.add(k, -1);
                    assert_abs_diff_eq!(
                        hbar.delta_desorb(&eta, k),
                        hbar.energy(&down) - hbar.energy(&eta),
                        epsilon = 1e-12
                    );
                    for l in 0..cg.cells() {
                        if l != k && eta.get(l) < cg.cell_volume() {
                            let mut moved = down.clone();
                            moved.add(l, 1);
                            assert_abs_diff_eq!(
                                hbar.delta_move(&eta, k, l).unwrap(),
                                hbar.energy(&moved) - hbar.energy(&eta),
                                epsilon = 1e-12
                            );
                        }
                    }
                }
            }
        }
        let eta = project(&cg, &MicroConfig::empty(&geom));
        assert!(hbar.delta_move(&eta, 2, 2).is_err());
    }

    #[test]
    fn correction_is_flip_minus_block_move() {
        let geom = chain(16);
        let cg = CoarseGeometry::new(&geom, 4).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 1.5, 6.0).unwrap();
        let h = Hamiltonian::new(Coupling::Single(Arc::new(pot)), Field::Constant(0.1), 1.0).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = MicroConfig::random(&geom, &mut rng);
        let eta = project(&cg, &sigma);
        for x in 0..16 {
            let exact = delta_correction(&h, &hbar, &cg, &sigma, &eta, x, None);
            // Untruncated pair sum agrees with the two-delta difference.
            let wide = delta_correction(&h, &hbar, &cg, &sigma, &eta, x, Some(100.0));
            assert_abs_diff_eq!(exact, wide, epsilon = 1e-12);
            // A tight cutoff only drops far pairs.
            let tight = delta_correction(&h, &hbar, &cg, &sigma, &eta, x, Some(2.0));
            assert!(tight.is_finite());
        }
    }

    #[test]
    fn correction_vanishes_when_compression_is_exact() {
        let geom = chain(16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);

        // q = 1: coarsening is the identity.
        let cg1 = CoarseGeometry::new(&geom, 1).unwrap();
        let pot = PairPotential::kac_smooth(&geom, 1.5, 6.0).unwrap();
        let h = Hamiltonian::new(Coupling::Single(Arc::new(pot)), Field::Constant(0.3), 1.0).unwrap();
        let hbar = coarsen_hamiltonian(&h, &cg1, CoarseLevel::FullInteraction).unwrap();
        assert!(hbar.is_exact());
        let sigma = MicroConfig::random(&geom, &mut rng);
        let eta = project(&cg1, &sigma);
        for x in 0..16 {
            assert_abs_diff_eq!(
                delta_correction(&h, &hbar, &cg1, &sigma, &eta, x, None),
                0.0,
                epsilon = 1e-12
            );
        }

        // Mean field at any q.
        let cg4 = CoarseGeometry::new(&geom, 4).unwrap();
        let cw = single(PairPotential::curie_weiss(&geom, 5.0).unwrap(), 0.3, 1.0);
        let hbar = coarsen_hamiltonian(&cw, &cg4, CoarseLevel::FullInteraction).unwrap();
        assert!(hbar.is_exact());
        let eta = project(&cg4, &sigma);
        for x in 0..16 {
            assert_abs_diff_eq!(
                delta_correction(&cw, &hbar, &cg4, &sigma, &eta, x, None),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn long_only_coarsening_requires_split() {
        let geom = chain(8);
        let h = single(PairPotential::curie_weiss(&geom, 1.0).unwrap(), 0.0, 1.0);
        let cg = CoarseGeometry::new(&geom, 2).unwrap();
        assert!(coarsen_hamiltonian(&h, &cg, CoarseLevel::LongRangeOnly).is_err());
        assert!(coarsen_hamiltonian(&h, &cg, CoarseLevel::FullInteraction).is_ok());
    }

    #[test]
    fn stable_sum_handles_large_vectors() {
        let v = vec![0.1; 1 << 17];
        let expect = 0.1 * (1 << 17) as f64;
        assert_abs_diff_eq!(stable_sum(&v), expect, epsilon = 1e-9);
        assert_eq!(stable_sum(&[]), 0.0);
        assert_eq!(stable_sum(&[2.5]), 2.5);
    }

    #[test]
    fn rejects_bad_construction() {
        let geom = chain(8);
        let pot = PairPotential::curie_weiss(&geom, 1.0).unwrap();
        assert!(Hamiltonian::new(
            Coupling::Single(Arc::new(pot.clone())),
            Field::Constant(0.0),
            -1.0
        )
        .is_err());
        assert!(Hamiltonian::new(
            Coupling::Single(Arc::new(pot)),
            Field::PerSite(vec![0.0; 7]),
            1.0
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn energy_is_translation_invariant(seed in 0u64..500, shift in 1usize..12) {
            let geom = chain(12);
            let pot = PairPotential::kac_smooth(&geom, 1.0, 4.0).unwrap();
            let h = single(pot, 0.7, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = MicroConfig::random(&geom, &mut rng);
            let shifted: Vec<u8> = (0..12).map(|x| sigma.get((x + shift) % 12)).collect();
            let shifted = MicroConfig::from_spins(shifted).unwrap();
            prop_assert!((h.energy(&sigma) - h.energy(&shifted)).abs() < 1e-12);
        }
    }
}
