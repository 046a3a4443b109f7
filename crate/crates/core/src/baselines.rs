//! Grid-search reference estimators over a polar (range, azimuth, elevation)
//! grid: the exhaustive single-path maximum-likelihood search and a
//! dictionary-based OMP.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, Vec3, spherical_to_cartesian};

/// Default dictionary budget for [`omp_polar`]: 1 GiB.
pub const DEFAULT_DICTIONARY_BUDGET: u64 = 1 << 30;

/// Grid points evaluated per parallel work item.
const CHUNK: usize = 256;

/// Tensor grid in range (m), azimuth and elevation (rad). Flat index order is
/// row-major over (range, azimuth, elevation) with elevation fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    pub r_points: Vec<f64>,
    pub omega_points: Vec<f64>,
    pub phi_points: Vec<f64>,
    /// Nominal spacing (range, azimuth, elevation).
    pub resolution: [f64; 3],
}

fn check_axis(name: &str, pts: &[f64]) -> Result<()> {
    if pts.is_empty() {
        return Err(Error::InvalidGrid(format!("{name} axis is empty")));
    }
    if pts.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGrid(format!("{name} axis has non-finite points")));
    }
    if pts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!("{name} axis is not strictly increasing")));
    }
    Ok(())
}

fn nominal_step(pts: &[f64]) -> f64 {
    if pts.len() < 2 { 0.0 } else { (pts[pts.len() - 1] - pts[0]) / (pts.len() - 1) as f64 }
}

/// Lattice points `origin + k * step` inside `[lo, hi]`.
fn lattice_points(origin: f64, step: f64, lo: f64, hi: f64) -> Vec<f64> {
    let k0 = ((lo - origin) / step).ceil() as i64;
    let k1 = ((hi - origin) / step).floor() as i64;
    (k0..=k1).map(|k| origin + k as f64 * step).collect()
}

impl PolarGrid {
    pub fn new(r_points: Vec<f64>, omega_points: Vec<f64>, phi_points: Vec<f64>) -> Result<Self> {
        check_axis("range", &r_points)?;
        check_axis("azimuth", &omega_points)?;
        check_axis("elevation", &phi_points)?;
        if r_points[0] <= 0.0 {
            return Err(Error::InvalidGrid("ranges must be positive".into()));
        }
        let resolution = [nominal_step(&r_points), nominal_step(&omega_points), nominal_step(&phi_points)];
        Ok(Self {
            r_points,
            omega_points,
            phi_points,
            resolution,
        })
    }

    /// Evenly spaced grid with the given point counts over closed intervals.
    pub fn uniform(r: (f64, f64, usize), omega: (f64, f64, usize), phi: (f64, f64, usize)) -> Result<Self> {
        let axis = |(lo, hi, n): (f64, f64, usize)| -> Vec<f64> {
            match n {
                0 => Vec::new(),
                1 => vec![0.5 * (lo + hi)],
                _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
            }
        };
        Self::new(axis(r), axis(omega), axis(phi))
    }

    /// The part of a global lattice that lies within `half_widths` of
    /// `center` = (range, azimuth, elevation). Ranges sit on `r_origin + k *
    /// r_step`, angles on multiples of `angle_step`; elevations are kept in
    /// `[0, pi/2]`.
    pub fn lattice_window(
        center: (f64, f64, f64),
        half_widths: (f64, f64, f64),
        r_origin: f64,
        r_step: f64,
        angle_step: f64,
    ) -> Result<Self> {
        if !(r_step > 0.0 && angle_step > 0.0) {
            return Err(Error::InvalidGrid("lattice steps must be positive".into()));
        }
        let (r, w, p) = center;
        let (hr, hw, hp) = half_widths;
        let r_pts = lattice_points(r_origin, r_step, (r - hr).max(r_origin), r + hr);
        let w_pts = lattice_points(0.0, angle_step, w - hw, w + hw);
        let p_pts = lattice_points(0.0, angle_step, (p - hp).max(0.0), (p + hp).min(PI / 2.0));
        let mut grid = Self::new(r_pts, w_pts, p_pts)?;
        grid.resolution = [r_step, angle_step, angle_step];
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.r_points.len() * self.omega_points.len() * self.phi_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (range, azimuth, elevation) indices of a flat index.
    pub fn unflatten(&self, flat: usize) -> (usize, usize, usize) {
        let np = self.phi_points.len();
        let nw = self.omega_points.len();
        (flat / (nw * np), (flat / np) % nw, flat % np)
    }

    pub fn spherical(&self, flat: usize) -> (f64, f64, f64) {
        let (i, j, k) = self.unflatten(flat);
        (self.r_points[i], self.omega_points[j], self.phi_points[k])
    }

    pub fn point(&self, flat: usize) -> Vec3 {
        let (r, w, p) = self.spherical(flat);
        spherical_to_cartesian(r, w, p)
    }

    /// Grid with every cell split in two along each axis.
    pub fn refined(&self) -> Result<Self> {
        let split = |pts: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(2 * pts.len());
            for w in pts.windows(2) {
                out.push(w[0]);
                out.push(0.5 * (w[0] + w[1]));
            }
            out.extend(pts.last());
            out
        };
        let mut grid = Self::new(split(&self.r_points), split(&self.omega_points), split(&self.phi_points))?;
        grid.resolution = self.resolution.map(|s| s / 2.0);
        Ok(grid)
    }
}

/// Exact unit-gain channel to `p` and its squared norm.
fn exact_channel(geometry: &ArrayGeometry, p: &Vec3, out: &mut [Complex64]) -> f64 {
    let k = 2.0 * PI / geometry.lambda;
    let scale = geometry.lambda / (4.0 * PI);
    let mut energy = 0.0;
    for (h, pos) in out.iter_mut().zip(&geometry.positions) {
        let r = (p - pos).norm();
        let a = scale / r;
        *h = Complex64::from_polar(a, -k * r);
        energy += a * a;
    }
    energy
}

/// Concentrated single-path likelihood `|h(p)^H y|^2 / ||h(p)||^2`.
pub fn grid_objective(y: &[Complex64], geometry: &ArrayGeometry, p: &Vec3) -> f64 {
    let mut h = vec![Complex64::new(0.0, 0.0); geometry.num_antennas()];
    let energy = exact_channel(geometry, p, &mut h);
    let c: Complex64 = h.iter().zip(y).map(|(h, y)| h.conj() * y).sum();
    c.norm_sqr() / energy
}

fn check_inputs(y: &[Complex64], geometry: &ArrayGeometry, grid: &PolarGrid) -> Result<()> {
    if y.len() != geometry.num_antennas() {
        return Err(Error::LengthMismatch {
            expected: geometry.num_antennas(),
            actual: y.len(),
        });
    }
    if grid.is_empty() {
        return Err(Error::InvalidGrid("grid is empty".into()));
    }
    Ok(())
}

/// Larger score wins; equal scores go to the lower index.
fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }
}

/// Index maximizing `score` over `0..n`, evaluated in parallel chunks.
fn parallel_argmax<F>(n: usize, score: F) -> usize
where
    F: Fn(usize, &mut Vec<Complex64>) -> f64 + Sync,
{
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map_init(Vec::new, |scratch, c| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                best = better(best, (score(idx, scratch), idx));
            }
            best
        })
        .reduce(|| (f64::NEG_INFINITY, usize::MAX), better)
        .1
}

/// Grid point maximizing the single-path likelihood with the exact channel.
pub fn mle_grid_oracle(y: &[Complex64], geometry: &ArrayGeometry, grid: &PolarGrid) -> Result<Vec3> {
    check_inputs(y, geometry, grid)?;
    let n_ant = geometry.num_antennas();
    let best = parallel_argmax(grid.len(), |idx, h| {
        h.resize(n_ant, Complex64::new(0.0, 0.0));
        let energy = exact_channel(geometry, &grid.point(idx), h);
        let c: Complex64 = h.iter().zip(y).map(|(h, y)| h.conj() * y).sum();
        c.norm_sqr() / energy
    });
    Ok(grid.point(best))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpConfig {
    /// Number of atoms selected; one per propagation path.
    pub n_iter: usize,
    /// Largest dictionary, in bytes, the estimator may allocate.
    pub budget_bytes: u64,
}

impl Default for OmpConfig {
    fn default() -> Self {
        Self {
            n_iter: 1,
            budget_bytes: DEFAULT_DICTIONARY_BUDGET,
        }
    }
}

/// Bytes needed for a dictionary of `atoms` unit-norm atoms of length `antennas`.
pub fn dictionary_bytes(atoms: usize, antennas: usize) -> Option<u64> {
    (atoms as u64)
        .checked_mul(antennas as u64)?
        .checked_mul(std::mem::size_of::<Complex64>() as u64)
}

/// Normalized near-field steering dictionary, one atom per grid point.
pub struct PolarDictionary {
    atoms: Vec<Complex64>,
    n_ant: usize,
}

impl PolarDictionary {
    pub fn build(geometry: &ArrayGeometry, grid: &PolarGrid, budget_bytes: u64) -> Result<Self> {
        let n_ant = geometry.num_antennas();
        let atoms = grid.len();
        let required = dictionary_bytes(atoms, n_ant).unwrap_or(u64::MAX);
        if required > budget_bytes {
            return Err(Error::BudgetExceeded {
                required,
                budget: budget_bytes,
                atoms,
                antennas: n_ant,
            });
        }
        let mut data = vec![Complex64::new(0.0, 0.0); atoms * n_ant];
        data.par_chunks_mut(n_ant).enumerate().for_each(|(idx, atom)| {
            let energy = exact_channel(geometry, &grid.point(idx), atom);
            let inv = 1.0 / energy.sqrt();
            atom.iter_mut().for_each(|v| *v *= inv);
        });
        Ok(Self { atoms: data, n_ant })
    }

    pub fn atom(&self, idx: usize) -> &[Complex64] {
        &self.atoms[idx * self.n_ant..(idx + 1) * self.n_ant]
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.n_ant
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    fn correlate(&self, idx: usize, r: &[Complex64]) -> Complex64 {
        self.atom(idx).iter().zip(r).map(|(a, v)| a.conj() * v).sum()
    }
}

/// Orthogonal matching pursuit over a polar dictionary; returns the location
/// of the selected atom carrying the most energy.
pub fn omp_polar(y: &[Complex64], geometry: &ArrayGeometry, grid: &PolarGrid, config: &OmpConfig) -> Result<Vec3> {
    check_inputs(y, geometry, grid)?;
    if config.n_iter == 0 {
        return Err(Error::InvalidConfig("OMP needs at least one iteration".into()));
    }
    let dict = PolarDictionary::build(geometry, grid, config.budget_bytes)?;
    let mut residual = y.to_vec();
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs = DVector::<Complex64>::zeros(0);
    for _ in 0..config.n_iter.min(dict.len()) {
        let pick = parallel_argmax(dict.len(), |idx, _| {
            if support.contains(&idx) { f64::NEG_INFINITY } else { dict.correlate(idx, &residual).norm_sqr() }
        });
        support.push(pick);
        let a = DMatrix::from_fn(geometry.num_antennas(), support.len(), |i, j| dict.atom(support[j])[i]);
        let yv = DVector::from_column_slice(y);
        let gram = a.adjoint() * &a;
        coeffs = gram.lu().solve(&(a.adjoint() * &yv)).unwrap_or_else(|| DVector::zeros(support.len()));
        let fitted = &a * &coeffs;
        residual = (yv - fitted).iter().copied().collect();
    }
    let strongest = (0..support.len())
        .max_by(|&i, &j| coeffs[i].norm().total_cmp(&coeffs[j].norm()).then(j.cmp(&i)))
        .expect("at least one atom is selected");
    Ok(grid.point(support[strongest]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{Scene, near_field_channel};
    use crate::geometry::PROPAGATION_SPEED;

    const LAMBDA: f64 = PROPAGATION_SPEED / 28.0e9;

    fn small_array() -> ArrayGeometry {
        ArrayGeometry::uniform_planar(12, 12, LAMBDA / 2.0, LAMBDA / 2.0, LAMBDA).unwrap()
    }

    fn small_grid() -> PolarGrid {
        PolarGrid::uniform((0.5, 1.5, 11), (-0.5, 0.5, 11), (0.1, 0.6, 11)).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(PolarGrid::new(vec![], vec![0.0], vec![0.0]).is_err());
        assert!(PolarGrid::new(vec![1.0, 1.0], vec![0.0], vec![0.0]).is_err());
        assert!(PolarGrid::new(vec![-1.0, 1.0], vec![0.0], vec![0.0]).is_err());
        let g = small_grid();
        assert_eq!(g.len(), 11 * 11 * 11);
        assert_eq!(g.unflatten(g.len() - 1), (10, 10, 10));
        assert_eq!(g.unflatten(12), (0, 1, 1));
    }

    #[test]
    fn lattice_window_stays_on_the_lattice() {
        let step = 0.02f64.to_radians();
        let w = PolarGrid::lattice_window((2.03, 0.5, 0.3), (0.3, 0.2f64.to_radians(), 0.2f64.to_radians()), 0.4, 0.1, step)
            .unwrap();
        for &r in &w.r_points {
            let k = (r - 0.4) / 0.1;
            assert!((k - k.round()).abs() < 1e-9);
            assert!((r - 2.03).abs() <= 0.3 + 1e-12);
        }
        for &a in w.omega_points.iter().chain(&w.phi_points) {
            assert!((a / step - (a / step).round()).abs() < 1e-9);
        }
        // 0.4 degrees of width hold 20 or 21 lattice points
        assert!((20..=21).contains(&w.omega_points.len()));
        assert_eq!(w.resolution, [0.1, step, step]);
    }

    #[test]
    fn on_grid_source_is_found_exactly() {
        let g = small_array();
        let grid = small_grid();
        let truth_idx = 5 * 121 + 3 * 11 + 7;
        let p = grid.point(truth_idx);
        let y = near_field_channel(&g, &Scene::new(p)).unwrap();
        assert_eq!(mle_grid_oracle(&y, &g, &grid).unwrap(), p);
        assert_eq!(omp_polar(&y, &g, &grid, &OmpConfig::default()).unwrap(), p);
    }

    #[test]
    fn off_grid_source_lands_on_best_neighbour() {
        let g = small_array();
        let grid = small_grid();
        let p = spherical_to_cartesian(1.03, 0.12, 0.33);
        let y = near_field_channel(&g, &Scene::new(p)).unwrap();
        let got = mle_grid_oracle(&y, &g, &grid).unwrap();
        // enumeration oracle
        let best = (0..grid.len())
            .map(|i| (grid_objective(&y, &g, &grid.point(i)), i))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
        assert_eq!(got, grid.point(best.1));
        let (i, j, k) = grid.unflatten(best.1);
        let cell = |pts: &[f64], idx: usize, v: f64| (pts[idx] - v).abs() <= grid_step(pts) + 1e-12;
        fn grid_step(pts: &[f64]) -> f64 {
            pts[1] - pts[0]
        }
        assert!(cell(&grid.r_points, i, 1.03));
        assert!(cell(&grid.omega_points, j, 0.12));
        assert!(cell(&grid.phi_points, k, 0.33));
    }

    #[test]
    fn objective_at_result_beats_quantized_truth() {
        let g = small_array();
        let grid = small_grid();
        let p = spherical_to_cartesian(0.77, -0.21, 0.44);
        let y: Vec<Complex64> = near_field_channel(&g, &Scene::new(p))
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, h)| h + Complex64::new(1e-4 * ((i * 7) % 5) as f64, -1e-4 * ((i * 3) % 4) as f64))
            .collect();
        let got = mle_grid_oracle(&y, &g, &grid).unwrap();
        let nearest = |pts: &[f64], v: f64| {
            pts.iter().copied().min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs())).unwrap()
        };
        let q = spherical_to_cartesian(
            nearest(&grid.r_points, 0.77),
            nearest(&grid.omega_points, -0.21),
            nearest(&grid.phi_points, 0.44),
        );
        assert!(grid_objective(&y, &g, &got) >= grid_objective(&y, &g, &q));
    }

    #[test]
    fn refinement_never_hurts_noiseless_oracle() {
        let g = small_array();
        let grid = small_grid();
        let fine = grid.refined().unwrap();
        assert_eq!(fine.r_points.len(), 21);
        for p in [spherical_to_cartesian(1.03, 0.12, 0.33), spherical_to_cartesian(0.61, -0.37, 0.52)] {
            let y = near_field_channel(&g, &Scene::new(p)).unwrap();
            let coarse = (mle_grid_oracle(&y, &g, &grid).unwrap() - p).norm();
            let refined = (mle_grid_oracle(&y, &g, &fine).unwrap() - p).norm();
            assert!(refined <= coarse + 1e-12);
        }
    }

    #[test]
    fn omp_matches_oracle_when_noiseless() {
        let g = small_array();
        let grid = small_grid();
        for p in [spherical_to_cartesian(0.93, 0.3, 0.2), spherical_to_cartesian(1.41, -0.05, 0.57)] {
            let y = near_field_channel(&g, &Scene::new(p)).unwrap();
            assert_eq!(
                omp_polar(&y, &g, &grid, &OmpConfig::default()).unwrap(),
                mle_grid_oracle(&y, &g, &grid).unwrap()
            );
        }
    }

    #[test]
    fn dictionary_budget_is_enforced() {
        let g = small_array();
        let grid = small_grid();
        let y = vec![Complex64::new(1.0, 0.0); g.num_antennas()];
        let cfg = OmpConfig {
            budget_bytes: 1000,
            ..OmpConfig::default()
        };
        match omp_polar(&y, &g, &grid, &cfg) {
            Err(Error::BudgetExceeded { required, atoms, antennas, .. }) => {
                assert_eq!(atoms, 1331);
                assert_eq!(antennas, 144);
                assert_eq!(required, 1331 * 144 * 16);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn two_path_omp_returns_the_stronger_path() {
        // enough aperture to resolve neighbouring range cells
        let g = ArrayGeometry::uniform_planar(32, 32, LAMBDA / 2.0, LAMBDA / 2.0, LAMBDA).unwrap();
        let grid = small_grid();
        let strong = grid.point(3 * 121 + 2 * 11 + 4);
        let weak = grid.point(8 * 121 + 9 * 11 + 1);
        let hs = near_field_channel(&g, &Scene::new(strong)).unwrap();
        let hw = near_field_channel(&g, &Scene::new(weak)).unwrap();
        let y: Vec<Complex64> = hs.iter().zip(&hw).map(|(a, b)| a + b * 0.3).collect();
        let cfg = OmpConfig {
            n_iter: 2,
            ..OmpConfig::default()
        };
        assert_eq!(omp_polar(&y, &g, &grid, &cfg).unwrap(), strong);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let g = small_array();
        assert!(mle_grid_oracle(&[Complex64::new(0.0, 0.0)], &g, &small_grid()).is_err());
    }
}
