//! Periodic lattices, occupation configurations, and the block-spin map.
//!
//! Sites live on a d-dimensional torus (d = 1 or 2) with side `n`, indexed
//! row-major: `site = y*n + x` in 2d, `site = x` in 1d. A coarse geometry
//! partitions the torus into cells of side `q` (q divides n); the block-spin
//! projection replaces each cell by its particle count in `0..=Q`, Q = q^d.

use rand::Rng;

use crate::{Error, Result};

/// A 1d or 2d torus of side `n` with `N = n^d` sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeGeometry {
    d: usize,
    n: usize,
    sites: usize,
}

impl LatticeGeometry {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(Error::config(format!("dimension must be 1 or 2, got {d}")));
        }
        if n == 0 {
            return Err(Error::config("lattice side must be positive"));
        }
        let sites = n.pow(d as u32);
        Ok(LatticeGeometry { d, n, sites })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.n
    }

    /// Total number of sites N.
    pub fn sites(&self) -> usize {
        self.sites
    }

    /// Row-major site index of `(x, y)`; `y` is ignored in 1d.
    pub fn site_of(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.n && (self.d == 2 || y == 0) && y < self.sites.max(1));
        y * self.n + x
    }

    /// Inverse of [`site_of`](Self::site_of): `(x, y)`, with `y = 0` in 1d.
    pub fn coords_of(&self, site: usize) -> (usize, usize) {
        debug_assert!(site < self.sites);
        (site % self.n, site / self.n)
    }

    /// Signed minimal-image representative of `a - b` along one axis,
    /// in `-(n/2-1)..=n/2` for even n.
    pub fn min_image(&self, a: usize, b: usize) -> isize {
        let n = self.n as isize;
        let mut delta = a as isize - b as isize;
        delta = delta.rem_euclid(n);
        if delta > n / 2 {
            delta -= n;
        }
        delta
    }

    /// Euclidean distance between sites under minimal image.
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        let (ax, ay) = self.coords_of(x);
        let (bx, by) = self.coords_of(y);
        let dx = self.min_image(ax, bx) as f64;
        let dy = self.min_image(ay, by) as f64;
        (dx * dx + dy * dy).sqrt()
    }

    /// Site index of the wrapped displacement `x - y`, used to key
    /// translation-invariant tables.
    pub fn disp_index(&self, x: usize, y: usize) -> usize {
        let (ax, ay) = self.coords_of(x);
        let (bx, by) = self.coords_of(y);
        let dx = (ax + self.n - bx) % self.n;
        let dy = (ay + self.n - by) % self.n;
        dy * self.n + dx
    }

    /// Distance of the displacement with wrapped coordinates `(dx, dy)`
    /// from the origin, under minimal image.
    pub fn disp_distance(&self, disp: usize) -> f64 {
        self.distance(disp, 0)
    }

    /// Site reached from `site` by the axis offsets `(dx, dy)`.
    pub fn offset(&self, site: usize, dx: isize, dy: isize) -> usize {
        let n = self.n as isize;
        let (x, y) = self.coords_of(site);
        let ox = (x as isize + dx).rem_euclid(n) as usize;
        let oy = if self.d == 2 {
            (y as isize + dy).rem_euclid(n) as usize
        } else {
            debug_assert_eq!(dy, 0);
            0
        };
        oy * self.n + ox
    }

    /// The 2d axis neighbors of `site` (left/right in 1d).
    pub fn neighbors(&self, site: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * self.d);
        out.push(self.offset(site, 1, 0));
        out.push(self.offset(site, -1, 0));
        if self.d == 2 {
            out.push(self.offset(site, 0, 1));
            out.push(self.offset(site, 0, -1));
        }
        out
    }
}

/// Partition of a [`LatticeGeometry`] into `M = (n/q)^d` cells of `Q = q^d`
/// sites. Cells are indexed row-major on the coarse grid of side `n/q`.
#[derive(Debug, Clone)]
pub struct CoarseGeometry {
    fine: LatticeGeometry,
    coarse: LatticeGeometry,
    q: usize,
    cell_volume: usize,
    site_cell: Vec<u32>,
    cell_sites: Vec<u32>, // M*Q, sites of cell k at [k*Q .. (k+1)*Q]
}

impl CoarseGeometry {
    pub fn new(geom: &LatticeGeometry, q: usize) -> Result<Self> {
        if q == 0 || geom.side() % q != 0 {
            return Err(Error::config(format!(
                "cell side {q} must divide lattice side {}",
                geom.side()
            )));
        }
        let coarse = LatticeGeometry::new(geom.dim(), geom.side() / q)?;
        let cell_volume = q.pow(geom.dim() as u32);
        let mut site_cell = vec![0u32; geom.sites()];
        let mut cell_sites = vec![0u32; geom.sites()];
        let mut fill = vec![0usize; coarse.sites()];
        for site in 0..geom.sites() {
            let (x, y) = geom.coords_of(site);
            let cell = coarse.site_of(x / q, y / q);
            site_cell[site] = cell as u32;
            cell_sites[cell * cell_volume + fill[cell]] = site as u32;
            fill[cell] += 1;
        }
        debug_assert!(fill.iter().all(|&c| c == cell_volume));
        Ok(CoarseGeometry {
            fine: geom.clone(),
            coarse,
            q,
            cell_volume,
            site_cell,
            cell_sites,
        })
    }

    pub fn fine(&self) -> &LatticeGeometry {
        &self.fine
    }

    /// The coarse grid as a lattice in its own right (side n/q).
    pub fn coarse(&self) -> &LatticeGeometry {
        &self.coarse
    }

    pub fn cell_side(&self) -> usize {
        self.q
    }

    /// Sites per cell, Q.
    pub fn cell_volume(&self) -> usize {
        self.cell_volume
    }

    /// Number of cells, M.
    pub fn cells(&self) -> usize {
        self.coarse.sites()
    }

    pub fn cell_of(&self, site: usize) -> usize {
        self.site_cell[site] as usize
    }

    pub fn sites_in(&self, cell: usize) -> &[u32] {
        &self.cell_sites[cell * self.cell_volume..(cell + 1) * self.cell_volume]
    }
}

/// Microscopic occupation state, one `0/1` value per site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroConfig {
    spins: Vec<u8>,
}

impl MicroConfig {
    pub fn empty(geom: &LatticeGeometry) -> Self {
        MicroConfig {
            spins: vec![0; geom.sites()],
        }
    }

    pub fn from_spins(spins: Vec<u8>) -> Result<Self> {
        if spins.iter().any(|&s| s > 1) {
            return Err(Error::argument("occupations must be 0 or 1"));
        }
        Ok(MicroConfig { spins })
    }

    /// Independent Bernoulli(1/2) occupations.
    pub fn random(geom: &LatticeGeometry, rng: &mut impl Rng) -> Self {
        let spins = (0..geom.sites()).map(|_| rng.gen_range(0..2u8)).collect();
        MicroConfig { spins }
    }

    /// Uniformly random configuration with exactly `count` particles.
    pub fn random_with_count(geom: &LatticeGeometry, count: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = geom.sites();
        if count > n {
            return Err(Error::argument(format!("{count} particles on {n} sites")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut spins = vec![0u8; n];
        for i in 0..count {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
            spins[idx[i]] = 1;
        }
        Ok(MicroConfig { spins })
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn get(&self, site: usize) -> u8 {
        self.spins[site]
    }

    pub fn spins(&self) -> &[u8] {
        &self.spins
    }

    pub fn particle_count(&self) -> usize {
        self.spins.iter().map(|&s| s as usize).sum()
    }

    /// In-place single-site flip.
    pub fn flip(&mut self, site: usize) {
        self.spins[site] ^= 1;
    }

    /// The flipped configuration sigma^x.
    pub fn flipped(&self, site: usize) -> Self {
        let mut out = self.clone();
        out.flip(site);
        out
    }

    /// In-place exchange of the values at two distinct sites.
    pub fn exchange(&mut self, x: usize, y: usize) -> Result<()> {
        if x == y {
            return Err(Error::argument("exchange sites must be distinct"));
        }
        self.spins.swap(x, y);
        Ok(())
    }

    pub fn exchanged(&self, x: usize, y: usize) -> Result<Self> {
        let mut out = self.clone();
        out.exchange(x, y)?;
        Ok(out)
    }

    /// Uniformly random site of `cell` carrying occupation `value`, given the
    /// number `count` of such sites (maintained by callers as part of eta).
    pub fn pick_in_cell(
        &self,
        cg: &CoarseGeometry,
        cell: usize,
        value: u8,
        count: usize,
        rng: &mut impl Rng,
    ) -> usize {
        debug_assert!(count > 0);
        let mut skip = rng.gen_range(0..count);
        for &site in cg.sites_in(cell) {
            if self.spins[site as usize] == value {
                if skip == 0 {
                    return site as usize;
                }
                skip -= 1;
            }
        }
        unreachable!("cell occupation count out of sync");
    }
}

/// Block-spin state: particle count per cell, each in `0..=Q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseConfig {
    counts: Vec<u16>,
}

impl CoarseConfig {
    pub fn from_counts(cg: &CoarseGeometry, counts: Vec<u16>) -> Result<Self> {
        if counts.len() != cg.cells() {
            return Err(Error::argument("count vector length != cell count"));
        }
        if counts.iter().any(|&c| c as usize > cg.cell_volume()) {
            return Err(Error::argument("cell occupation exceeds cell volume"));
        }
        Ok(CoarseConfig { counts })
    }

    pub fn cells(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, cell: usize) -> usize {
        self.counts[cell] as usize
    }

    pub fn counts(&self) -> &[u16] {
        &self.counts
    }

    pub fn particle_count(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    pub(crate) fn add(&mut self, cell: usize, delta: i32) {
        let v = self.counts[cell] as i32 + delta;
        debug_assert!(v >= 0);
        self.counts[cell] = v as u16;
    }
}

/// Block-spin projection T: counts the particles in each cell.
pub fn project(cg: &CoarseGeometry, sigma: &MicroConfig) -> CoarseConfig {
    let mut counts = vec![0u16; cg.cells()];
    for (site, &s) in sigma.spins().iter().enumerate() {
        counts[cg.cell_of(site)] += s as u16;
    }
    CoarseConfig { counts }
}

/// Draws sigma uniformly from the fiber `{sigma : T sigma = eta}`: each cell
/// independently receives a uniform subset of `eta(k)` occupied sites.
pub fn reconstruct_uniform(
    cg: &CoarseGeometry,
    eta: &CoarseConfig,
    rng: &mut impl Rng,
) -> Result<MicroConfig> {
    if eta.cells() != cg.cells() {
        return Err(Error::argument("coarse state does not match geometry"));
    }
    let q = cg.cell_volume();
    let mut sigma = MicroConfig::empty(cg.fine());
    let mut scratch: Vec<u32> = Vec::with_capacity(q);
    for cell in 0..cg.cells() {
        let k = eta.get(cell);
        if k > q {
            return Err(Error::argument("cell occupation exceeds cell volume"));
        }
        scratch.clear();
        scratch.extend_from_slice(cg.sites_in(cell));
        for i in 0..k {
            let j = rng.gen_range(i..q);
            scratch.swap(i, j);
            sigma.spins[scratch[i] as usize] = 1;
        }
    }
    Ok(sigma)
}

/// Upper size limit for exhaustive configuration enumeration.
pub const MAX_ENUM_SITES: usize = 20;

/// All 2^N configurations in bitmask order: configuration `i` has
/// `sigma(x) = (i >> x) & 1`. Refuses N > [`MAX_ENUM_SITES`].
pub fn enumerate_configs(geom: &LatticeGeometry) -> Result<Vec<MicroConfig>> {
    let n = geom.sites();
    if n > MAX_ENUM_SITES {
        return Err(Error::refused(format!(
            "enumeration of 2^{n} configurations (limit 2^{MAX_ENUM_SITES})"
        )));
    }
    Ok((0u64..1 << n)
        .map(|mask| MicroConfig {
            spins: (0..n).map(|x| ((mask >> x) & 1) as u8).collect(),
        })
        .collect())
}

/// Bitmask index of a configuration under the [`enumerate_configs`] order.
pub fn config_index(sigma: &MicroConfig) -> u64 {
    debug_assert!(sigma.len() <= 64);
    sigma
        .spins()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (x, &s)| acc | ((s as u64) << x))
}

/// Mixed-radix index of a coarse state: cell k contributes eta(k) * (Q+1)^k.
pub fn coarse_index(cg: &CoarseGeometry, eta: &CoarseConfig) -> u64 {
    let base = cg.cell_volume() as u64 + 1;
    let mut idx = 0u64;
    for cell in (0..eta.cells()).rev() {
        idx = idx * base + eta.get(cell) as u64;
    }
    idx
}

/// All (Q+1)^M coarse states in mixed-radix order matching [`coarse_index`].
pub fn enumerate_coarse_configs(cg: &CoarseGeometry) -> Result<Vec<CoarseConfig>> {
    let base = cg.cell_volume() as u64 + 1;
    let m = cg.cells() as u32;
    let total = base.checked_pow(m).filter(|&t| t <= 1 << MAX_ENUM_SITES);
    let total = total.ok_or_else(|| {
        Error::refused(format!("enumeration of {base}^{m} coarse states"))
    })?;
    Ok((0..total)
        .map(|mut idx| {
            let counts = (0..m)
                .map(|_| {
                    let c = (idx % base) as u16;
                    idx /= base;
                    c
                })
                .collect();
            CoarseConfig { counts }
        })
        .collect())
}

/// Text snapshot: PGM "P2" (maxval 1) for 2d lattices, a single line of
/// space-separated occupations for chains.
pub fn snapshot_string(geom: &LatticeGeometry, sigma: &MicroConfig) -> String {
    let mut out = String::new();
    if geom.dim() == 2 {
        let n = geom.side();
        out.push_str(&format!("P2\n{n} {n}\n1\n"));
        for y in 0..n {
            let row: Vec<String> = (0..n)
                .map(|x| sigma.get(geom.site_of(x, y)).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    } else {
        let line: Vec<String> = sigma.spins().iter().map(|s| s.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
