//! Per-subarray AoA posterior estimation and extrinsic message extraction.
//!
//! Each subarray sees one planar wave, `y_m = alpha a(theta_x, theta_y) + n_m`.
//! The gain is profiled out with a ridge least-squares estimate, which leaves a
//! two-dimensional objective in the direction cosines:
//!
//! ```text
//! L(theta) = -||y_m - alpha_hat(theta) a(theta)||^2 / sigma_m^2
//!            + log prior_x(theta_x) + log prior_y(theta_y)
//! ```
//!
//! The mode is located with a zero-padded 2-D FFT periodogram, refined with a
//! safeguarded Newton iteration, and each axis is summarized as a von Mises
//! message by matching the curvature of `L` at the mode. This plays the role a
//! full variational line-spectral estimator would for a single spectral line,
//! behind the same prior-in / posterior-out contract.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::channel::SubarrayFarFieldModel;
use crate::error::{Error, Result};
use crate::geometry::{AoaPair, SubarrayShape, centered_indices};
use crate::vonmises::{Combine, VonMisesMsg, vm_combine, vm_from_laplace};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Periodogram grid is at least `pad_factor * N` bins per axis.
    pub pad_factor: usize,
    /// Newton iterations before falling back to the coarse grid point.
    pub newton_cap: usize,
    /// Stop when `|grad L| <= grad_tol * (1 + |L|)`.
    pub grad_tol: f64,
    /// Gain prior variance as a multiple of the received power per antenna.
    pub gain_prior_ratio: f64,
    /// Lower bound on the noise variance used for weighting, relative to the
    /// received power per antenna. Keeps noiseless inputs finite.
    pub noise_floor_rel: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            pad_factor: 4,
            newton_cap: 50,
            grad_tol: 1e-10,
            gain_prior_ratio: 1e6,
            noise_floor_rel: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoaPosterior {
    pub post_x: VonMisesMsg,
    pub post_y: VonMisesMsg,
    pub theta_hat: AoaPair,
    pub alpha_hat: Complex64,
    /// Noise variance including model mismatch, never below the known `sigma^2`.
    pub residual_var: f64,
    /// False when Newton did not converge and the grid fallback was used.
    pub converged: bool,
}

impl AoaPosterior {
    pub fn posterior(&self, axis: crate::geometry::Axis) -> VonMisesMsg {
        match axis {
            crate::geometry::Axis::X => self.post_x,
            crate::geometry::Axis::Y => self.post_y,
        }
    }

    pub fn fit(&self) -> SubarrayFarFieldModel {
        SubarrayFarFieldModel {
            alpha: self.alpha_hat,
            aoa: self.theta_hat,
        }
    }
}

/// Value, gradient and Hessian of the log-posterior at one point.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: Vector2<f64>,
    pub hess: Matrix2<f64>,
    /// `a(theta)^H y`.
    pub correlation: Complex64,
}

/// Concentrated log-posterior of one subarray's direction cosines.
#[derive(Debug, Clone)]
pub struct SubarrayObjective<'a> {
    shape: SubarrayShape,
    y: &'a [Complex64],
    priors: [VonMisesMsg; 2],
    noise_var: f64,
    gain_prior_var: f64,
    px: Vec<f64>,
    qy: Vec<f64>,
}

impl<'a> SubarrayObjective<'a> {
    pub fn new(
        shape: SubarrayShape,
        y: &'a [Complex64],
        prior_x: VonMisesMsg,
        prior_y: VonMisesMsg,
        noise_var: f64,
        gain_prior_var: f64,
    ) -> Result<Self> {
        if y.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: y.len(),
            });
        }
        Ok(Self {
            shape,
            y,
            priors: [prior_x, prior_y],
            noise_var,
            gain_prior_var,
            px: centered_indices(shape.n_x).collect(),
            qy: centered_indices(shape.n_y).collect(),
        })
    }

    fn ridge(&self) -> f64 {
        self.noise_var / self.gain_prior_var
    }

    /// Weight on `|a^H y|^2` such that the data term equals
    /// `-||y - alpha_hat a||^2 / sigma^2` up to a constant.
    pub fn data_weight(&self) -> f64 {
        let n = self.shape.len() as f64;
        let eps = self.ridge();
        (n + 2.0 * eps) / ((n + eps) * (n + eps)) / self.noise_var
    }

    pub fn gain(&self, correlation: Complex64) -> Complex64 {
        correlation / (self.shape.len() as f64 + self.ridge())
    }

    fn prior_value(&self, tx: f64, ty: f64) -> f64 {
        self.priors[0].log_kernel(tx) + self.priors[1].log_kernel(ty)
    }

    /// Objective value only, from a precomputed `|a^H y|^2`.
    fn value_from_power(&self, power: f64, tx: f64, ty: f64) -> f64 {
        self.data_weight() * power + self.prior_value(tx, ty)
    }

    pub fn eval(&self, theta: AoaPair) -> ObjectiveEval {
        let kx = 2.0 * PI * self.shape.d_x / self.shape.lambda;
        let ky = 2.0 * PI * self.shape.d_y / self.shape.lambda;
        let ey: Vec<Complex64> = self
            .qy
            .iter()
            .map(|&q| Complex64::from_polar(1.0, -ky * q * theta.theta_y))
            .collect();
        let zero = Complex64::new(0.0, 0.0);
        // s, s_p, s_pp, s_q, s_qq, s_pq
        let mut acc = [zero; 6];
        for (row, &p) in self.y.chunks_exact(self.shape.n_y).zip(&self.px) {
            let (mut t0, mut t1, mut t2) = (zero, zero, zero);
            for ((&v, &e), &q) in row.iter().zip(&ey).zip(&self.qy) {
                let ve = v * e;
                t0 += ve;
                t1 += ve * q;
                t2 += ve * (q * q);
            }
            let ex = Complex64::from_polar(1.0, -kx * p * theta.theta_x);
            let (u0, u1, u2) = (ex * t0, ex * t1, ex * t2);
            acc[0] += u0;
            acc[1] += u0 * p;
            acc[2] += u0 * (p * p);
            acc[3] += u1;
            acc[4] += u2;
            acc[5] += u1 * p;
        }
        let [s, s_p, s_pp, s_q, s_qq, s_pq] = acc;
        let j = Complex64::new(0.0, 1.0);
        let ds = [-j * kx * s_p, -j * ky * s_q];
        let d2s = [[-kx * kx * s_pp, -kx * ky * s_pq], [-kx * ky * s_pq, -ky * ky * s_qq]];
        let w = self.data_weight();
        let mut grad = Vector2::zeros();
        let mut hess = Matrix2::zeros();
        for a in 0..2 {
            grad[a] = w * 2.0 * (s.conj() * ds[a]).re;
            for b in 0..2 {
                hess[(a, b)] = w * 2.0 * (ds[a].conj() * ds[b] + s.conj() * d2s[a][b]).re;
            }
        }
        let thetas = [theta.theta_x, theta.theta_y];
        for (axis, prior) in self.priors.iter().enumerate() {
            let (d1, d2) = prior.log_kernel_derivs(thetas[axis]);
            grad[axis] += d1;
            hess[(axis, axis)] += d2;
        }
        ObjectiveEval {
            value: w * s.norm_sqr() + self.prior_value(theta.theta_x, theta.theta_y),
            grad,
            hess,
            correlation: s,
        }
    }
}

/// Direction cosines reachable from each FFT bin along one axis.
fn bin_directions(bins: usize, d: f64, lambda: f64) -> Vec<(usize, f64)> {
    let period = lambda / d;
    let mut out = Vec::new();
    for k in 0..bins {
        let u = k as f64 / bins as f64;
        let n_lo = (-1.0 / period - u).ceil() as i64;
        let n_hi = (1.0 / period - u).floor() as i64;
        for n in n_lo..=n_hi {
            let theta = (u + n as f64) * period;
            if theta.abs() <= 1.0 {
                out.push((k, theta));
            }
        }
    }
    out
}

fn is_visible(theta: AoaPair) -> bool {
    theta.theta_x.abs() <= 1.0
        && theta.theta_y.abs() <= 1.0
        && theta.theta_x * theta.theta_x + theta.theta_y * theta.theta_y <= 1.0
}

struct Refined {
    theta: AoaPair,
    eval: ObjectiveEval,
    converged: bool,
}

/// Safeguarded Newton ascent: Newton direction on a sign-corrected Hessian,
/// Armijo backtracking, never accepting a decrease.
fn newton_refine(obj: &SubarrayObjective<'_>, start: AoaPair, cap: usize, grad_tol: f64) -> Refined {
    let mut theta = start;
    let mut cur = obj.eval(theta);
    for _ in 0..cap {
        let scale = 1.0 + cur.value.abs();
        if cur.grad.norm() <= grad_tol * scale {
            return Refined { theta, eval: cur, converged: true };
        }
        let eig = SymmetricEigen::new(-cur.hess);
        let top = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let inv = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.abs().max(1e-12 * top)));
        let dir = eig.eigenvectors * inv * eig.eigenvectors.transpose() * cur.grad;
        let slope = cur.grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = AoaPair::new(theta.theta_x + t * dir[0], theta.theta_y + t * dir[1]);
            if is_visible(cand) {
                let e = obj.eval(cand);
                if e.value >= cur.value + 1e-4 * t * slope {
                    accepted = Some((cand, e));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, e)) => {
                let step = ((cand.theta_x - theta.theta_x).powi(2) + (cand.theta_y - theta.theta_y).powi(2)).sqrt();
                theta = cand;
                cur = e;
                if step < 1e-15 {
                    return Refined { theta, eval: cur, converged: true };
                }
            }
            None => {
                // No representable ascent left: converged iff the predicted gain is at rounding level.
                let converged = slope <= 1e-9 * scale;
                return Refined { theta, eval: cur, converged };
            }
        }
    }
    let converged = cur.grad.norm() <= grad_tol * (1.0 + cur.value.abs());
    Refined { theta, eval: cur, converged }
}

/// Stateful estimator; keeps FFT plans between calls.
pub struct AoaEstimator {
    pub config: EstimatorConfig,
    planner: FftPlanner<f64>,
}

impl std::fmt::Debug for AoaEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AoaEstimator").field("config", &self.config).finish()
    }
}

impl Default for AoaEstimator {
    fn default() -> Self {
        Self::new(EstimatorConfig::default())
    }
}

impl AoaEstimator {
    pub fn new(config: EstimatorConfig) -> Self {
        Self {
            config,
            planner: FftPlanner::new(),
        }
    }

    /// Best point of the prior-weighted, zero-padded periodogram within the
    /// visible region.
    fn coarse_search(&mut self, obj: &SubarrayObjective<'_>) -> AoaPair {
        let shape = obj.shape;
        let kx_bins = (self.config.pad_factor * shape.n_x).max(1).next_power_of_two();
        let ky_bins = (self.config.pad_factor * shape.n_y).max(1).next_power_of_two();
        let fft_y: Arc<dyn Fft<f64>> = self.planner.plan_fft_forward(ky_bins);
        let fft_x: Arc<dyn Fft<f64>> = self.planner.plan_fft_forward(kx_bins);

        let zero = Complex64::new(0.0, 0.0);
        let mut grid = vec![zero; kx_bins * ky_bins];
        for (p, row) in obj.y.chunks_exact(shape.n_y).enumerate() {
            let dst = &mut grid[p * ky_bins..(p + 1) * ky_bins];
            dst[..shape.n_y].copy_from_slice(row);
            fft_y.process(dst);
        }
        let mut column = vec![zero; kx_bins];
        let mut power = vec![0.0; kx_bins * ky_bins];
        for ky in 0..ky_bins {
            for (kx, c) in column.iter_mut().enumerate() {
                *c = grid[kx * ky_bins + ky];
            }
            fft_x.process(&mut column);
            for (kx, c) in column.iter().enumerate() {
                power[kx * ky_bins + ky] = c.norm_sqr();
            }
        }

        let dirs_x = bin_directions(kx_bins, shape.d_x, shape.lambda);
        let dirs_y = bin_directions(ky_bins, shape.d_y, shape.lambda);
        let mut best = (f64::NEG_INFINITY, AoaPair::new(0.0, 0.0));
        for &(bx, tx) in &dirs_x {
            for &(by, ty) in &dirs_y {
                if tx * tx + ty * ty > 1.0 {
                    continue;
                }
                let v = obj.value_from_power(power[bx * ky_bins + by], tx, ty);
                if v > best.0 {
                    best = (v, AoaPair::new(tx, ty));
                }
            }
        }
        best.1
    }

    /// Laplace-approximated von Mises posteriors of both direction cosines.
    pub fn estimate(
        &mut self,
        y_m: &[Complex64],
        prior_x: VonMisesMsg,
        prior_y: VonMisesMsg,
        shape: &SubarrayShape,
        sigma2: f64,
    ) -> Result<AoaPosterior> {
        if y_m.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: y_m.len(),
            });
        }
        let n = shape.len() as f64;
        let power = (y_m.iter().map(|v| v.norm_sqr()).sum::<f64>() / n).max(f64::MIN_POSITIVE);
        let weight_floor = sigma2.max(self.config.noise_floor_rel * power);
        let gain_prior_var = self.config.gain_prior_ratio * power;

        let mut obj = SubarrayObjective::new(*shape, y_m, prior_x, prior_y, weight_floor, gain_prior_var)?;
        let start = self.coarse_search(&obj);
        let mut refined = newton_refine(&obj, start, self.config.newton_cap, self.config.grad_tol);

        let informative_prior = !(prior_x.is_uniform() && prior_y.is_uniform());
        let fit = SubarrayFarFieldModel {
            alpha: obj.gain(refined.eval.correlation),
            aoa: refined.theta,
        };
        let residual_var = estimate_residual_var(y_m, shape, &fit, sigma2)?;
        let weight_var = residual_var.max(weight_floor);
        if weight_var > weight_floor {
            obj.noise_var = weight_var;
            if informative_prior {
                let again = newton_refine(&obj, refined.theta, self.config.newton_cap, self.config.grad_tol);
                refined = Refined {
                    converged: refined.converged && again.converged,
                    ..again
                };
            } else {
                refined.eval = obj.eval(refined.theta);
            }
        }

        let (theta, eval, converged) = if refined.converged {
            (refined.theta, refined.eval, true)
        } else {
            let e = obj.eval(start);
            let hess = finite_difference_diagonal(&obj, start);
            (
                start,
                ObjectiveEval {
                    hess: Matrix2::new(hess[0], 0.0, 0.0, hess[1]),
                    ..e
                },
                false,
            )
        };

        let floor = crate::vonmises::KAPPA_FLOOR * PI * PI;
        let post_x = vm_from_laplace(theta.theta_x, (-eval.hess[(0, 0)]).max(floor))?;
        let post_y = vm_from_laplace(theta.theta_y, (-eval.hess[(1, 1)]).max(floor))?;
        let fit = SubarrayFarFieldModel {
            alpha: obj.gain(eval.correlation),
            aoa: theta,
        };
        let residual_var = estimate_residual_var(y_m, shape, &fit, sigma2)?;
        Ok(AoaPosterior {
            post_x,
            post_y,
            theta_hat: theta,
            alpha_hat: fit.alpha,
            residual_var,
            converged,
        })
    }
}

fn finite_difference_diagonal(obj: &SubarrayObjective<'_>, at: AoaPair) -> [f64; 2] {
    let h = 1e-5;
    let f = |tx: f64, ty: f64| obj.eval(AoaPair::new(tx, ty)).value;
    let f0 = f(at.theta_x, at.theta_y);
    [
        (f(at.theta_x + h, at.theta_y) - 2.0 * f0 + f(at.theta_x - h, at.theta_y)) / (h * h),
        (f(at.theta_x, at.theta_y + h) - 2.0 * f0 + f(at.theta_x, at.theta_y - h)) / (h * h),
    ]
}

/// One-shot convenience wrapper around [`AoaEstimator::estimate`].
pub fn estimate_posterior(
    y_m: &[Complex64],
    prior_x: VonMisesMsg,
    prior_y: VonMisesMsg,
    shape: &SubarrayShape,
    sigma2: f64,
    config: &EstimatorConfig,
) -> Result<AoaPosterior> {
    AoaEstimator::new(config.clone()).estimate(y_m, prior_x, prior_y, shape, sigma2)
}

/// Posterior divided by the incoming prior.
pub fn extrinsic_message(posterior: &VonMisesMsg, prior: &VonMisesMsg) -> VonMisesMsg {
    vm_combine(posterior, prior, Combine::Quotient)
}

/// `max(sigma^2, ||y_m - alpha a(theta)||^2 / N_m)`.
pub fn estimate_residual_var(
    y_m: &[Complex64],
    shape: &SubarrayShape,
    fit: &SubarrayFarFieldModel,
    sigma2: f64,
) -> Result<f64> {
    let predicted = fit.predict(shape)?;
    if predicted.len() != y_m.len() {
        return Err(Error::LengthMismatch {
            expected: predicted.len(),
            actual: y_m.len(),
        });
    }
    let rss: f64 = y_m.iter().zip(&predicted).map(|(y, p)| (y - p).norm_sqr()).sum();
    Ok(sigma2.max(rss / y_m.len() as f64))
}
