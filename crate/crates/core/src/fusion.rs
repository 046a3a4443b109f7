//! AoA fusion: the location belief built from von Mises AoA messages, its
//! maximizer and Hessian-based covariance, and the feedback messages sent back
//! to each subarray's AoA variables.
//!
//! Every factor contributes `kappa * cos(pi * theta(p) - mu)` to the log-belief,
//! where `theta(p)` is the direction cosine of `p` seen from the factor's
//! subarray center along the factor's axis.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{Axis, Vec3};
use crate::vonmises::VonMisesMsg;

/// Eigenvalue floor (m^-2) applied to the negated Hessian before inversion.
pub const HESSIAN_EIGEN_FLOOR: f64 = 1e-8;

/// Upper bound on feedback concentrations.
pub const FEEDBACK_KAPPA_CAP: f64 = 1e10;

/// One AoA message attached to a subarray center and axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoaFactor {
    pub center: Vec3,
    pub axis: Axis,
    pub msg: VonMisesMsg,
}

/// Log-belief value with its gradient and Hessian in `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefEval {
    pub value: f64,
    pub grad: Vec3,
    pub hess: Matrix3<f64>,
}

impl BeliefEval {
    fn zero() -> Self {
        Self {
            value: 0.0,
            grad: Vec3::zeros(),
            hess: Matrix3::zeros(),
        }
    }

    fn add(&mut self, other: &Self) {
        self.value += other.value;
        self.grad += other.grad;
        self.hess += other.hess;
    }

    fn sub(&self, other: &Self) -> Self {
        Self {
            value: self.value - other.value,
            grad: self.grad - other.grad,
            hess: self.hess - other.hess,
        }
    }
}

impl AoaFactor {
    pub fn new(center: Vec3, axis: Axis, msg: VonMisesMsg) -> Self {
        Self { center, axis, msg }
    }

    /// Direction cosine of `p` from this factor's center.
    pub fn theta(&self, p: &Vec3) -> Result<f64> {
        let w = p - self.center;
        let r = w.norm();
        if r == 0.0 {
            return Err(Error::ZeroDistance([self.center.x, self.center.y, self.center.z]));
        }
        Ok(w.dot(&self.axis.unit()) / r)
    }

    pub fn value(&self, p: &Vec3) -> Result<f64> {
        if self.msg.kappa == 0.0 {
            return Ok(0.0);
        }
        Ok(self.msg.log_kernel(self.theta(p)?))
    }

    pub fn eval(&self, p: &Vec3) -> Result<BeliefEval> {
        let w = p - self.center;
        let r = w.norm();
        if r == 0.0 {
            return Err(Error::ZeroDistance([self.center.x, self.center.y, self.center.z]));
        }
        if self.msg.kappa == 0.0 {
            return Ok(BeliefEval::zero());
        }
        let e = self.axis.unit();
        let u = w / r;
        let theta = u.dot(&e);
        let grad_theta = (e - u * theta) / r;
        let hess_theta = (-(e * u.transpose() + u * e.transpose()) - Matrix3::identity() * theta
            + u * u.transpose() * (3.0 * theta))
            / (r * r);
        let (s, c) = (PI * theta - self.msg.mu).sin_cos();
        let k = self.msg.kappa;
        Ok(BeliefEval {
            value: k * c,
            grad: grad_theta * (-k * PI * s),
            hess: grad_theta * grad_theta.transpose() * (-k * PI * PI * c) + hess_theta * (-k * PI * s),
        })
    }
}

/// Sum of all factor log-kernels at `p`, optionally leaving one factor out.
pub fn location_log_belief(p: &Vec3, factors: &[AoaFactor], exclude: Option<usize>) -> Result<BeliefEval> {
    let mut total = BeliefEval::zero();
    for (k, f) in factors.iter().enumerate() {
        if Some(k) != exclude {
            total.add(&f.eval(p)?);
        }
    }
    Ok(total)
}

fn log_belief_value(p: &Vec3, factors: &[AoaFactor]) -> f64 {
    factors
        .iter()
        .map(|f| f.value(p).unwrap_or(f64::NEG_INFINITY))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    /// Absolute gradient tolerance. Ascent also stops, as converged, when no
    /// step improves the belief beyond rounding.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Iterates farther than this from the origin count as diverged.
    pub divergence_radius: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iter: 500,
            divergence_radius: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub p: Vec3,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Ascent direction `|A|^-1 g` where `|A|` is the negated Hessian with its
/// eigenvalues replaced by their magnitudes.
fn ascent_direction(eval: &BeliefEval) -> Vec3 {
    let eig = SymmetricEigen::new(-eval.hess);
    let top = eig.eigenvalues.amax();
    if top.is_nan() || top <= 0.0 {
        return eval.grad;
    }
    let inv = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.abs().max(1e-12 * top)));
    eig.eigenvectors * inv * eig.eigenvectors.transpose() * eval.grad
}

fn ascend(
    factors: &[AoaFactor],
    exclude: Option<usize>,
    init: Vec3,
    init_eval: Option<BeliefEval>,
    config: &MapConfig,
) -> Result<MapResult> {
    let tol = config.grad_tol;
    let mut p = init;
    let mut cur = match init_eval {
        Some(e) => e,
        None => location_log_belief(&p, factors, exclude)?,
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        if cur.grad.norm() <= tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = ascent_direction(&cur);
        let slope = cur.grad.dot(&dir);
        // Once the predicted gain is below the rounding of the value, steps
        // are judged by the gradient norm instead.
        let rounding = 0.5 * slope <= 1e-13 * (1.0 + cur.value.abs());
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = p + dir * t;
            if let Ok(e) = location_log_belief(&cand, factors, exclude) {
                let better = if rounding {
                    e.grad.norm() < cur.grad.norm()
                } else {
                    e.value >= cur.value + 1e-4 * t * slope
                };
                if better {
                    accepted = Some((cand, e));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            converged = rounding;
            break;
        };
        let step = (cand - p).norm();
        p = cand;
        cur = e;
        if p.norm() > config.divergence_radius {
            break;
        }
        if step <= 1e-15 * (1.0 + p.norm()) {
            converged = true;
            break;
        }
    }
    // A planar array cannot tell z from -z; keep the source in front.
    if p.z < 0.0 {
        p.z = -p.z;
        cur = location_log_belief(&p, factors, exclude)?;
    }
    Ok(MapResult {
        p,
        value: cur.value,
        grad_norm: cur.grad.norm(),
        iterations,
        converged: converged && p.norm() <= config.divergence_radius,
    })
}

/// Local maximizer of the (optionally leave-one-out) log-belief.
///
/// Ascent uses the Newton direction on the sign-corrected Hessian with Armijo
/// backtracking; plain gradient steps would crawl along the weakly curved range
/// direction.
pub fn map_location(
    factors: &[AoaFactor],
    exclude: Option<usize>,
    init: Vec3,
    config: &MapConfig,
) -> Result<MapResult> {
    ascend(factors, exclude, init, None, config)
}

/// Leave-one-out maximizer warm-started from a point where the full belief was
/// already evaluated; the first step reuses `full_at_init` minus the excluded
/// factor.
pub fn map_location_excluding(
    factors: &[AoaFactor],
    exclude: usize,
    init: Vec3,
    full_at_init: &BeliefEval,
    config: &MapConfig,
) -> Result<MapResult> {
    let own = factors[exclude].eval(&init)?;
    ascend(factors, Some(exclude), init, Some(full_at_init.sub(&own)), config)
}

/// Gaussian approximation of the location belief.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief3D {
    pub mean: Vec3,
    pub cov: Matrix3<f64>,
    /// Set when at least one curvature eigenvalue hit the floor.
    pub ill_conditioned: bool,
}

impl GaussianBelief3D {
    pub fn isotropic(mean: Vec3, var: f64) -> Self {
        Self {
            mean,
            cov: Matrix3::identity() * var,
            ill_conditioned: false,
        }
    }
}

/// Covariance from a negated Hessian, flooring eigenvalues at
/// [`HESSIAN_EIGEN_FLOOR`].
pub fn covariance_from_hessian(mean: Vec3, hess: &Matrix3<f64>) -> GaussianBelief3D {
    let neg = -(hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(neg);
    let mut ill_conditioned = false;
    let inv = eig.eigenvalues.map(|l| {
        if l < HESSIAN_EIGEN_FLOOR || !l.is_finite() {
            ill_conditioned = true;
            1.0 / HESSIAN_EIGEN_FLOOR
        } else {
            1.0 / l
        }
    });
    let cov = eig.eigenvectors * Matrix3::from_diagonal(&inv) * eig.eigenvectors.transpose();
    GaussianBelief3D {
        mean,
        cov: (cov + cov.transpose()) * 0.5,
        ill_conditioned,
    }
}

/// `C = (-H)^-1` at `p_hat`.
pub fn belief_covariance(p_hat: &Vec3, factors: &[AoaFactor], exclude: Option<usize>) -> Result<GaussianBelief3D> {
    let eval = location_log_belief(p_hat, factors, exclude)?;
    Ok(covariance_from_hessian(*p_hat, &eval.hess))
}

/// Geometry of the feedback approximation for one (subarray, axis) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackGeometry {
    /// Center minus belief mean.
    pub u_bar: Vec3,
    /// Unit vector orthogonal to `u_bar` in the plane of `u_bar` and the axis.
    pub v: Vec3,
    /// Direction cosine of the belief mean from the center.
    pub theta_bar: f64,
}

/// `None` when `u_bar` is (numerically) parallel to the axis.
pub fn feedback_geometry(axis: Axis, mean: &Vec3, center: &Vec3) -> Result<Option<FeedbackGeometry>> {
    let u_bar = center - mean;
    let r = u_bar.norm();
    if r == 0.0 {
        return Err(Error::ZeroDistance([center.x, center.y, center.z]));
    }
    let e = axis.unit();
    let theta_bar = -u_bar.dot(&e) / r;
    let w = u_bar.cross(&e).cross(&u_bar);
    let wn = w.norm();
    if wn <= 1e-12 * r * r || theta_bar.abs() > 1.0 - 1e-9 {
        return Ok(None);
    }
    Ok(Some(FeedbackGeometry {
        u_bar,
        v: w / wn,
        theta_bar,
    }))
}

/// Von Mises message to the AoA variable of (`axis`, `center`) implied by a
/// Gaussian location belief, linearized along the direction that moves the AoA.
pub fn feedback_message(axis: Axis, belief: &GaussianBelief3D, center: &Vec3) -> Result<VonMisesMsg> {
    match feedback_geometry(axis, &belief.mean, center)? {
        None => {
            let u_bar = center - belief.mean;
            let theta_bar = (-u_bar.dot(&axis.unit()) / u_bar.norm()).clamp(-1.0, 1.0);
            Ok(VonMisesMsg::centered_at(theta_bar, FEEDBACK_KAPPA_CAP))
        }
        Some(g) => {
            let spread = g.v.dot(&(belief.cov * g.v));
            let denom = PI * PI * (1.0 - g.theta_bar * g.theta_bar) * spread;
            let kappa = if denom > 0.0 {
                (g.u_bar.norm_squared() / denom).min(FEEDBACK_KAPPA_CAP)
            } else {
                FEEDBACK_KAPPA_CAP
            };
            Ok(VonMisesMsg::centered_at(g.theta_bar, kappa))
        }
    }
}

/// Search box for the first location estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct InitGrid {
    pub n_r: usize,
    pub n_dir: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl InitGrid {
    pub fn new(r_min: f64, r_max: f64) -> Self {
        Self {
            n_r: 20,
            n_dir: 20,
            r_min,
            r_max,
        }
    }

    /// Candidate points: direction-cosine grid over the front hemisphere times
    /// log-spaced ranges.
    pub fn points(&self) -> Vec<Vec3> {
        let dirs: Vec<f64> = (0..self.n_dir)
            .map(|k| {
                if self.n_dir == 1 {
                    0.0
                } else {
                    -0.95 + 1.9 * k as f64 / (self.n_dir - 1) as f64
                }
            })
            .collect();
        let ranges: Vec<f64> = (0..self.n_r)
            .map(|k| {
                if self.n_r == 1 {
                    self.r_min
                } else {
                    self.r_min * (self.r_max / self.r_min).powf(k as f64 / (self.n_r - 1) as f64)
                }
            })
            .collect();
        let mut out = Vec::with_capacity(self.n_r * self.n_dir * self.n_dir);
        for &ux in &dirs {
            for &uy in &dirs {
                let s = ux * ux + uy * uy;
                if s >= 1.0 {
                    continue;
                }
                let u = Vec3::new(ux, uy, (1.0 - s).sqrt());
                for &r in &ranges {
                    out.push(u * r);
                }
            }
        }
        out
    }
}

/// Highest-belief point of the initialization grid (lowest index on ties).
pub fn grid_initializer(factors: &[AoaFactor], grid: &InitGrid) -> Vec3 {
    let mut best = (f64::NEG_INFINITY, Vec3::new(0.0, 0.0, grid.r_min));
    for p in grid.points() {
        let v = log_belief_value(&p, factors);
        if v > best.0 {
            best = (v, p);
        }
    }
    best.1
}

/// Least-squares intersection of the rays implied by the message modes, one
/// ray per subarray center carrying both axes. `None` when fewer than two
/// distinct rays exist, the rays are nearly parallel, or the point lands
/// behind the array.
pub fn triangulate(factors: &[AoaFactor]) -> Option<Vec3> {
    let mut rays: Vec<(Vec3, [Option<f64>; 2])> = Vec::new();
    for f in factors.iter().filter(|f| !f.msg.is_uniform()) {
        let slot = match rays.iter_mut().find(|(c, _)| *c == f.center) {
            Some(r) => r,
            None => {
                rays.push((f.center, [None, None]));
                rays.last_mut().expect("just pushed")
            }
        };
        slot.1[f.axis.index()] = Some(f.msg.mode_theta());
    }
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    let mut used = 0;
    for (c, [tx, ty]) in &rays {
        let (Some(tx), Some(ty)) = (tx, ty) else { continue };
        let s = tx * tx + ty * ty;
        let u = Vec3::new(*tx, *ty, (1.0 - s).max(0.0).sqrt()).normalize();
        let proj = Matrix3::identity() - u * u.transpose();
        a += proj;
        b += proj * c;
        used += 1;
    }
    if used < 2 {
        return None;
    }
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.min() <= 1e-12 * eig.eigenvalues.max() {
        return None;
    }
    let inv = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let p = eig.eigenvectors * inv * eig.eigenvectors.transpose() * b;
    (p.iter().all(|v| v.is_finite()) && p.z > 0.0).then_some(p)
}

/// Triangulated start clamped to the grid's range interval, or the grid
/// maximizer when triangulation is not possible.
pub fn initial_location(factors: &[AoaFactor], grid: &InitGrid) -> Vec3 {
    match triangulate(factors) {
        Some(p) => p * (p.norm().clamp(grid.r_min, grid.r_max) / p.norm()),
        None => grid_initializer(factors, grid),
    }
}
