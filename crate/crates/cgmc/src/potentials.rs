//! Translation-invariant pair interactions on the torus.
//!
//! A potential is fixed at construction by tabulating the coupling for every
//! wrapped displacement; samplers and energy differences only read the table.
//! All supported families depend on the minimal-image Euclidean distance
//! `r = |x - y|` alone, and the tabulation asserts that isotropy.
//!
//! `coarsen` produces the block-averaged interaction on the cell lattice:
//! distinct cells couple through the mean of the Q^2 site pair couplings,
//! while pairs inside one cell are summarised by the single mean coupling
//! `diag` over the Q(Q-1) ordered within-cell pairs.

use std::sync::Arc;

use crate::lattice::{CoarseGeometry, LatticeGeometry};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    /// Coupling `k` at distance 1, zero elsewhere.
    NearestNeighbor { coupling: f64 },
    /// Mean-field coupling `j / N` between every pair of distinct sites.
    CurieWeiss { coupling: f64 },
    /// Kac scaling of the algebraic shape `v * u^{-3/2}`:
    /// `J(r) = v/N * (r/N)^{-3/2}`, with `v` fixed by [`normalize_kac`].
    KacAlgebraic { mass: f64, v: f64 },
    /// Gaussian attraction minus weaker, longer-ranged Gaussian repulsion:
    /// `J(r) = j0 (exp(-(r/r_a)^2) - chi exp(-(r/r_r)^2))` up to the cutoff.
    MorseGaussian { j0: f64, r_attract: f64, r_repel: f64, chi: f64 },
    /// Values fixed directly per tabulated distance.
    Tabulated { label: String },
}

impl PotentialKind {
    pub fn label(&self) -> &str {
        match self {
            PotentialKind::NearestNeighbor { .. } => "nearest_neighbor",
            PotentialKind::CurieWeiss { .. } => "curie_weiss",
            PotentialKind::KacAlgebraic { .. } => "kac_algebraic",
            PotentialKind::MorseGaussian { .. } => "morse_gaussian",
            PotentialKind::Tabulated { label } => label,
        }
    }
}

/// One nonzero coupling at wrapped axis offsets `(dx, dy)`, `0 <= dx, dy < n`.
/// Kept as a flat list so local-field scans touch only interacting sites.
#[derive(Debug, Clone, Copy)]
pub struct ScanEntry {
    pub dx: u32,
    pub dy: u32,
    pub j: f64,
}

fn scan_entries(geom: &LatticeGeometry, table: &[f64]) -> Vec<ScanEntry> {
    let n = geom.side();
    (1..table.len())
        .filter(|&d| table[d] != 0.0)
        .map(|d| ScanEntry {
            dx: (d % n) as u32,
            dy: (d / n) as u32,
            j: table[d],
        })
        .collect()
}

/// A pair coupling `J(x - y)`, stored per wrapped displacement index.
#[derive(Debug, Clone)]
pub struct PairPotential {
    kind: PotentialKind,
    geom: LatticeGeometry,
    cutoff: f64,
    table: Vec<f64>,
    scan: Vec<ScanEntry>,
    /// Distinct `(r, J(r))` pairs over the lattice, sorted by r (r > 0).
    radial: Vec<(f64, f64)>,
    box_radius: usize,
    trips: u64,
}

impl PairPotential {
    fn build(kind: PotentialKind, geom: &LatticeGeometry, cutoff: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        if !(cutoff > 0.0) {
            return Err(Error::config("potential cutoff must be positive"));
        }
        let n = geom.sites();
        let mut table = vec![0.0; n];
        for disp in 1..n {
            let r = geom.disp_distance(disp);
            if r > 0.0 && r <= cutoff {
                table[disp] = f(r);
            }
        }
        Self::from_table(kind, geom, cutoff, table)
    }

    fn from_table(kind: PotentialKind, geom: &LatticeGeometry, cutoff: f64, table: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(table.len(), geom.sites());
        debug_assert_eq!(table[0], 0.0);
        let mut radial: Vec<(f64, f64)> = Vec::new();
        let mut box_radius = 0usize;
        for disp in 1..table.len() {
            let r = geom.disp_distance(disp);
            match radial.iter().position(|&(rr, _)| rr == r) {
                Some(i) => {
                    if (radial[i].1 - table[disp]).abs() > 1e-12 * (1.0 + radial[i].1.abs()) {
                        return Err(Error::config(format!(
                            "anisotropic table: J differs between displacements at r = {r}"
                        )));
                    }
                }
                None => radial.push((r, table[disp])),
            }
            if table[disp] != 0.0 {
                let (x, y) = geom.coords_of(disp);
                let cheb = geom.min_image(x, 0).unsigned_abs().max(geom.min_image(y, 0).unsigned_abs());
                box_radius = box_radius.max(cheb);
            }
        }
        radial.sort_by(|a, b| a.0.total_cmp(&b.0));
        let span = (2 * box_radius + 1).min(geom.side()) as u64;
        let trips = span.pow(geom.dim() as u32);
        let scan = scan_entries(geom, &table);
        Ok(PairPotential {
            kind,
            geom: geom.clone(),
            cutoff,
            table,
            scan,
            radial,
            box_radius,
            trips,
        })
    }

    pub fn nearest_neighbor(geom: &LatticeGeometry, coupling: f64) -> Result<Self> {
        Self::build(PotentialKind::NearestNeighbor { coupling }, geom, 1.0, move |r| {
            if r == 1.0 {
                coupling
            } else {
                0.0
            }
        })
    }

    pub fn curie_weiss(geom: &LatticeGeometry, coupling: f64) -> Result<Self> {
        let n = geom.sites() as f64;
        let full = full_range(geom);
        Self::build(PotentialKind::CurieWeiss { coupling }, geom, full, move |_| coupling / n)
    }

    /// Algebraically decaying Kac potential carrying total mass `j0`,
    /// see [`normalize_kac`].
    pub fn kac_algebraic(geom: &LatticeGeometry, mass: f64) -> Result<Self> {
        let v = normalize_kac(mass, geom)?;
        let n = geom.sites() as f64;
        let full = full_range(geom);
        Self::build(PotentialKind::KacAlgebraic { mass, v }, geom, full, move |r| {
            v / n * (r / n).powf(-1.5)
        })
    }

    /// Smooth compactly supported Kac shape `V(u) = cos^2(pi u / 2)` on
    /// `[0, 1]`, scaled to range `range`: `J(r) = j0/range^d V(r/range)`.
    pub fn kac_smooth(geom: &LatticeGeometry, j0: f64, range: f64) -> Result<Self> {
        let amp = j0 / range.powi(geom.dim() as i32);
        let kind = PotentialKind::Tabulated {
            label: "kac_smooth".into(),
        };
        Self::build(kind, geom, range, move |r| {
            let u = r / range;
            amp * (std::f64::consts::FRAC_PI_2 * u).cos().powi(2)
        })
    }

    pub fn morse_gaussian(
        geom: &LatticeGeometry,
        j0: f64,
        r_attract: f64,
        r_repel: f64,
        chi: f64,
        cutoff: f64,
    ) -> Result<Self> {
        if r_attract <= 0.0 || r_repel <= 0.0 {
            return Err(Error::config("interaction ranges must be positive"));
        }
        let kind = PotentialKind::MorseGaussian {
            j0,
            r_attract,
            r_repel,
            chi,
        };
        Self::build(kind, geom, cutoff, move |r| {
            j0 * ((-(r / r_attract).powi(2)).exp() - chi * (-(r / r_repel).powi(2)).exp())
        })
    }

    /// Tabulates an arbitrary radial profile; mostly for tests and splits.
    pub fn from_radial_fn(
        geom: &LatticeGeometry,
        label: &str,
        cutoff: f64,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        Self::build(
            PotentialKind::Tabulated { label: label.into() },
            geom,
            cutoff,
            f,
        )
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geom
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Coupling at distance `r > 0`; errors on `r <= 0` (self-coupling is
    /// not part of a pair potential) and, for directly tabulated kinds, on
    /// distances that do not occur on the lattice.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::argument(format!("pair coupling needs r > 0, got {r}")));
        }
        if r > self.cutoff {
            return Ok(0.0);
        }
        match &self.kind {
            PotentialKind::NearestNeighbor { coupling } => {
                Ok(if r == 1.0 { *coupling } else { 0.0 })
            }
            PotentialKind::CurieWeiss { coupling } => Ok(coupling / self.geom.sites() as f64),
            PotentialKind::KacAlgebraic { v, .. } => {
                let n = self.geom.sites() as f64;
                Ok(v / n * (r / n).powf(-1.5))
            }
            PotentialKind::MorseGaussian {
                j0,
                r_attract,
                r_repel,
                chi,
            } => Ok(j0 * ((-(r / r_attract).powi(2)).exp() - chi * (-(r / r_repel).powi(2)).exp())),
            PotentialKind::Tabulated { .. } => self
                .radial
                .iter()
                .find(|&&(rr, _)| (rr - r).abs() < 1e-9)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::argument(format!("distance {r} not tabulated"))),
        }
    }

    /// Table lookup by wrapped displacement index; `at_disp(0) = 0`.
    #[inline]
    pub fn at_disp(&self, disp: usize) -> f64 {
        self.table[disp]
    }

    #[inline]
    pub fn between(&self, x: usize, y: usize) -> f64 {
        self.table[self.geom.disp_index(x, y)]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Nonzero couplings as wrapped offsets, for local-field scans.
    pub fn scan(&self) -> &[ScanEntry] {
        &self.scan
    }

    /// Distinct `(r, J(r))` pairs, sorted by distance.
    pub fn radial_profile(&self) -> &[(f64, f64)] {
        &self.radial
    }

    /// Chebyshev radius of the support; the scan box `[-b, b]^d` capped at
    /// the lattice covers every nonzero coupling.
    pub fn box_radius(&self) -> usize {
        self.box_radius
    }

    /// Sites visited by one neighborhood scan: `min(2b+1, n)^d`. This is the
    /// per-evaluation operation count reported by the samplers.
    pub fn scan_trips(&self) -> u64 {
        self.trips
    }

    /// CSV rows `r,J(r)` over the tabulated distances.
    pub fn radial_csv(&self) -> String {
        let mut out = String::from("r,j\n");
        for &(r, v) in &self.radial {
            out.push_str(&format!("{r},{v}\n"));
        }
        out
    }
}

fn full_range(geom: &LatticeGeometry) -> f64 {
    let half = (geom.side() / 2) as f64;
    (geom.dim() as f64).sqrt() * half + 1.0
}

/// Amplitude `v` making the algebraic Kac potential
/// `J(r) = v/N (r/N)^{-3/2}` carry total mass `sum_{x != 0} J(|x|) = j0`,
/// the sum running over nonzero minimal-image displacements of the torus.
pub fn normalize_kac(j0: f64, geom: &LatticeGeometry) -> Result<f64> {
    if geom.sites() < 2 {
        return Err(Error::config("Kac normalization needs at least two sites"));
    }
    let n = geom.sites() as f64;
    let mut mass = 0.0;
    for disp in 1..geom.sites() {
        let r = geom.disp_distance(disp);
        mass += (r / n).powf(-1.5) / n;
    }
    Ok(j0 / mass)
}

/// Smallest integer `L` such that `|J(r)| < tol` for every tabulated
/// distance `r > L`.
pub fn cutoff_range(pot: &PairPotential, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::argument("tolerance must be positive"));
    }
    let max_kept = pot
        .radial_profile()
        .iter()
        .filter(|&&(_, v)| v.abs() >= tol)
        .map(|&(r, _)| r)
        .fold(0.0f64, f64::max);
    Ok(max_kept.ceil() as usize)
}

/// Short-range / long-range decomposition of one potential at range `s`.
#[derive(Debug, Clone)]
pub struct SplitPotential {
    short: Arc<PairPotential>,
    long: Arc<PairPotential>,
    s_range: f64,
}

impl SplitPotential {
    /// Splits `pot` into `short = J 1[r <= s]` and `long = J - short`.
    pub fn split(pot: &PairPotential, s_range: f64) -> Result<Self> {
        if !(s_range > 0.0) {
            return Err(Error::config("split range must be positive"));
        }
        let geom = pot.geometry();
        let mut short_table = vec![0.0; geom.sites()];
        let mut long_table = vec![0.0; geom.sites()];
        for disp in 1..geom.sites() {
            let r = geom.disp_distance(disp);
            if r <= s_range {
                short_table[disp] = pot.at_disp(disp);
            } else {
                long_table[disp] = pot.at_disp(disp);
            }
        }
        let label = pot.kind().label();
        let short = PairPotential::from_table(
            PotentialKind::Tabulated { label: format!("{label}_short") },
            geom,
            s_range,
            short_table,
        )?;
        let long = PairPotential::from_table(
            PotentialKind::Tabulated { label: format!("{label}_long") },
            geom,
            pot.cutoff(),
            long_table,
        )?;
        Ok(SplitPotential {
            short: Arc::new(short),
            long: Arc::new(long),
            s_range,
        })
    }

    /// Assembles a split from separately constructed parts (e.g. a
    /// nearest-neighbor short part plus a mean-field long part).
    pub fn from_parts(short: PairPotential, long: PairPotential) -> Result<Self> {
        if short.geometry() != long.geometry() {
            return Err(Error::config("split parts live on different lattices"));
        }
        let s_range = short.cutoff();
        Ok(SplitPotential {
            short: Arc::new(short),
            long: Arc::new(long),
            s_range,
        })
    }

    pub fn short(&self) -> &PairPotential {
        &self.short
    }

    pub fn long(&self) -> &PairPotential {
        &self.long
    }

    pub fn s_range(&self) -> f64 {
        self.s_range
    }

    /// The recombined total `J = J_s + J_l` as one table.
    pub fn total(&self) -> Result<PairPotential> {
        let geom = self.short.geometry();
        let table: Vec<f64> = self
            .short
            .table()
            .iter()
            .zip(self.long.table())
            .map(|(a, b)| a + b)
            .collect();
        PairPotential::from_table(
            PotentialKind::Tabulated { label: "split_total".into() },
            geom,
            self.short.cutoff().max(self.long.cutoff()),
            table,
        )
    }
}

/// External field, constant or site-resolved.
#[derive(Debug, Clone)]
pub enum Field {
    Constant(f64),
    PerSite(Vec<f64>),
}

impl Field {
    #[inline]
    pub fn at(&self, site: usize) -> f64 {
        match self {
            Field::Constant(h) => *h,
            Field::PerSite(v) => v[site],
        }
    }

    /// Mean of the field over cell `k`.
    pub fn cell_average(&self, cg: &CoarseGeometry, cell: usize) -> f64 {
        match self {
            Field::Constant(h) => *h,
            Field::PerSite(v) => {
                let sum: f64 = cg.sites_in(cell).iter().map(|&s| v[s as usize]).sum();
                sum / cg.cell_volume() as f64
            }
        }
    }
}

/// Block-averaged interaction on the cell lattice.
///
/// `offdiag` is keyed by coarse displacement; `diag` is the mean coupling of
/// ordered within-cell pairs and vanishes for q = 1, where coarsening is the
/// identity. `hbar` carries the cell-averaged external field.
#[derive(Debug, Clone)]
pub struct CoarsePotential {
    coarse_geom: LatticeGeometry,
    offdiag: Vec<f64>,
    scan: Vec<ScanEntry>,
    diag: f64,
    hbar: Vec<f64>,
    box_radius: usize,
    trips: u64,
    exact: bool,
}

/// Block-averages `pot` over the cells of `cg` and the field alongside it.
///
/// The compression is exact (the coarse energy of the projection reproduces
/// the fine energy identically) for mean-field couplings and for q = 1;
/// `CoarsePotential::is_exact` records this so samplers can skip fine-level
/// corrections that are identically zero.
pub fn coarsen(pot: &PairPotential, cg: &CoarseGeometry, field: &Field) -> Result<CoarsePotential> {
    if pot.geometry() != cg.fine() {
        return Err(Error::config("potential and coarse geometry lattice mismatch"));
    }
    let coarse_geom = cg.coarse().clone();
    let m = cg.cells();
    let q = cg.cell_volume() as f64;

    let mut offdiag = vec![0.0; m];
    let anchor = cg.sites_in(0);
    for cell in 1..m {
        let mut sum = 0.0;
        for &x in anchor {
            for &y in cg.sites_in(cell) {
                sum += pot.between(x as usize, y as usize);
            }
        }
        offdiag[cell] = sum / (q * q);
    }

    let diag = if cg.cell_volume() > 1 {
        let mut sum = 0.0;
        for &x in anchor {
            for &y in anchor {
                if x != y {
                    sum += pot.between(x as usize, y as usize);
                }
            }
        }
        sum / (q * (q - 1.0))
    } else {
        0.0
    };

    let hbar = (0..m).map(|k| field.cell_average(cg, k)).collect();

    let mut box_radius = 0usize;
    for disp in 1..m {
        if offdiag[disp] != 0.0 {
            let (x, y) = coarse_geom.coords_of(disp);
            let cheb = coarse_geom
                .min_image(x, 0)
                .unsigned_abs()
                .max(coarse_geom.min_image(y, 0).unsigned_abs());
            box_radius = box_radius.max(cheb);
        }
    }
    let span = (2 * box_radius + 1).min(coarse_geom.side()) as u64;
    let trips = span.pow(coarse_geom.dim() as u32);

    let exact = matches!(pot.kind(), PotentialKind::CurieWeiss { .. }) || cg.cell_side() == 1;
    let scan = scan_entries(&coarse_geom, &offdiag);
    Ok(CoarsePotential {
        coarse_geom,
        offdiag,
        scan,
        diag,
        hbar,
        box_radius,
        trips,
        exact,
    })
}

impl CoarsePotential {
    pub fn coarse_geometry(&self) -> &LatticeGeometry {
        &self.coarse_geom
    }

    /// Coupling between distinct cells `k != l`.
    #[inline]
    pub fn between_cells(&self, k: usize, l: usize) -> f64 {
        debug_assert_ne!(k, l);
        self.offdiag[self.coarse_geom.disp_index(k, l)]
    }

    #[inline]
    pub fn at_disp(&self, disp: usize) -> f64 {
        self.offdiag[disp]
    }

    /// Mean coupling of ordered site pairs inside one cell.
    pub fn diag(&self) -> f64 {
        self.diag
    }

    pub fn hbar(&self, cell: usize) -> f64 {
        self.hbar[cell]
    }

    /// Nonzero cell couplings as wrapped offsets on the coarse grid.
    pub fn scan(&self) -> &[ScanEntry] {
        &self.scan
    }

    /// Same interaction with the coarse field replaced; cheap enough to
    /// call once per point of a field sweep.
    pub fn with_field(&self, cg: &CoarseGeometry, field: &Field) -> Self {
        let mut out = self.clone();
        out.hbar = (0..cg.cells()).map(|k| field.cell_average(cg, k)).collect();
        out
    }

    pub fn box_radius(&self) -> usize {
        self.box_radius
    }

    /// Cells visited by one coarse neighborhood scan (including the center),
    /// `min(2b+1, n/q)^d`.
    pub fn scan_trips(&self) -> u64 {
        self.trips
    }

    /// True when the block average reproduces the fine energy exactly.
    pub fn is_exact(&self) -> bool {
        self.exact
    }
}

/// The two-level mismatch `J_c(x, y) = J(x - y) - Jbar(cell x, cell y)`,
/// truncated beyond distance `l_c`. Not translation invariant: it depends on
/// the positions of x and y inside their cells, so it is kept as a pair
/// functional rather than a displacement table.
#[derive(Debug, Clone)]
pub struct CorrectionPotential {
    pot: Arc<PairPotential>,
    coarse: Arc<CoarsePotential>,
    cg: CoarseGeometry,
    l_c: f64,
}

pub fn correction_potential(
    pot: &PairPotential,
    cg: &CoarseGeometry,
    field: &Field,
    l_c: f64,
) -> Result<CorrectionPotential> {
    if !(l_c > 0.0) {
        return Err(Error::config("correction cutoff must be positive"));
    }
    let coarse = coarsen(pot, cg, field)?;
    Ok(CorrectionPotential {
        pot: Arc::new(pot.clone()),
        coarse: Arc::new(coarse),
        cg: cg.clone(),
        l_c,
    })
}

impl CorrectionPotential {
    pub fn eval_pair(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return 0.0;
        }
        let geom = self.pot.geometry();
        if geom.distance(x, y) > self.l_c {
            return 0.0;
        }
        let (k, l) = (self.cg.cell_of(x), self.cg.cell_of(y));
        let jbar = if k == l {
            self.coarse.diag()
        } else {
            self.coarse.between_cells(k, l)
        };
        self.pot.between(x, y) - jbar
    }

    /// Largest `|J_c|` over all site pairs within the cutoff. One anchor
    /// cell suffices: corrections are invariant under cell translations.
    pub fn max_abs(&self) -> f64 {
        let geom = self.pot.geometry();
        let mut max = 0.0f64;
        for &x in self.cg.sites_in(0) {
            for y in 0..geom.sites() {
                if y != x as usize {
                    max = max.max(self.eval_pair(x as usize, y).abs());
                }
            }
        }
        max
    }

    /// CSV rows `r,j,j_c` seen from site 0 (a cell corner), for profile
    /// plots of the potential against its two-level mismatch.
    pub fn profile_csv(&self) -> String {
        let geom = self.pot.geometry();
        let mut rows: Vec<(f64, f64, f64)> = (1..geom.sites())
            .map(|y| (geom.distance(0, y), self.pot.between(0, y), self.eval_pair(0, y)))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.dedup_by(|a, b| a.0 == b.0 && a.2 == b.2);
        let mut out = String::from("r,j,j_c\n");
        for (r, j, jc) in rows {
            out.push_str(&format!("{r},{j},{jc}\n"));
        }
        out
    }
}
