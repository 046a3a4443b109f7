//! Von Mises messages over the wrapped variable `pi * theta`, where `theta` is a
//! direction cosine in [-1, 1].
//!
//! Every AoA message is a `VonMisesMsg`. Products and quotients of messages are
//! done in natural parameters `kappa * exp(j mu)`, which add and subtract. All
//! conversions between `theta` and the angle `pi * theta` live in this module.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Smallest concentration a quotient may produce; below it the result is
/// treated as uninformative.
pub const KAPPA_FLOOR: f64 = 1e-8;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI { w + 2.0 * PI } else { w }
}

/// `ln I0(kappa)` without overflow for any finite `kappa >= 0`.
pub fn log_bessel_i0(kappa: f64) -> f64 {
    let k = kappa.abs();
    if k <= 50.0 {
        // power series: sum (k^2/4)^n / (n!)^2, all terms positive
        let q = k * k / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..400 {
            term *= q / (n as f64 * n as f64);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum.ln()
    } else {
        // large-argument expansion: e^k / sqrt(2 pi k) * sum c_n / k^n
        let mut c = 1.0;
        let mut sum = 1.0;
        for n in 1..16 {
            let odd = (2 * n - 1) as f64;
            c *= odd * odd / (8.0 * n as f64 * k);
            sum += c;
        }
        k - 0.5 * (2.0 * PI * k).ln() + sum.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VonMisesMsg {
    /// Mean direction of `pi * theta`, in (-pi, pi].
    pub mu: f64,
    /// Concentration, zero for the uniform message.
    pub kappa: f64,
}

/// Whether two messages are multiplied or one is divided by the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Product,
    Quotient,
}

impl Default for VonMisesMsg {
    fn default() -> Self {
        Self::uniform()
    }
}

impl VonMisesMsg {
    pub fn new(mu: f64, kappa: f64) -> Self {
        let kappa = kappa.max(0.0);
        if kappa == 0.0 {
            Self::uniform()
        } else {
            Self {
                mu: wrap_angle(mu),
                kappa,
            }
        }
    }

    pub fn uniform() -> Self {
        Self { mu: 0.0, kappa: 0.0 }
    }

    /// Message centered on direction cosine `theta`.
    pub fn centered_at(theta: f64, kappa: f64) -> Self {
        Self::new(PI * theta, kappa)
    }

    pub fn is_uniform(&self) -> bool {
        self.kappa <= KAPPA_FLOOR
    }

    /// Mode expressed as a direction cosine.
    pub fn mode_theta(&self) -> f64 {
        self.mu / PI
    }

    pub fn natural(&self) -> Complex64 {
        Complex64::from_polar(self.kappa, self.mu)
    }

    pub fn from_natural(z: Complex64) -> Self {
        let kappa = z.norm();
        if kappa == 0.0 {
            Self::uniform()
        } else {
            Self {
                mu: wrap_angle(z.arg()),
                kappa,
            }
        }
    }

    /// Unnormalized log-density in `theta`: `kappa cos(pi theta - mu)`.
    pub fn log_kernel(&self, theta: f64) -> f64 {
        self.kappa * (PI * theta - self.mu).cos()
    }

    /// First and second derivatives of [`log_kernel`](Self::log_kernel) in `theta`.
    pub fn log_kernel_derivs(&self, theta: f64) -> (f64, f64) {
        let (s, c) = (PI * theta - self.mu).sin_cos();
        (-self.kappa * PI * s, -self.kappa * PI * PI * c)
    }

    /// Normalized log-density of the angle `pi * theta`.
    pub fn log_density(&self, theta: f64) -> f64 {
        self.log_kernel(theta) - (2.0 * PI).ln() - log_bessel_i0(self.kappa)
    }

    pub fn combine(&self, other: &Self, op: Combine) -> Self {
        match op {
            Combine::Product => {
                if other.kappa == 0.0 {
                    return *self;
                }
                if self.kappa == 0.0 {
                    return *other;
                }
                Self::from_natural(self.natural() + other.natural())
            }
            Combine::Quotient => {
                if other.kappa == 0.0 {
                    return *self;
                }
                let z = self.natural() - other.natural();
                if z.norm() < KAPPA_FLOOR {
                    let dominant = if self.kappa >= other.kappa { self.mu } else { other.mu };
                    Self {
                        mu: dominant,
                        kappa: KAPPA_FLOOR,
                    }
                } else {
                    Self::from_natural(z)
                }
            }
        }
    }

    /// Convex mix of natural parameters: `(1 - weight) * self + weight * previous`.
    pub fn damped(&self, previous: &Self, weight: f64) -> Self {
        if weight == 0.0 {
            return *self;
        }
        Self::from_natural(self.natural() * (1.0 - weight) + previous.natural() * weight)
    }
}

/// Product (`Combine::Product`) or quotient (`Combine::Quotient`) of two messages.
pub fn vm_combine(a: &VonMisesMsg, b: &VonMisesMsg, op: Combine) -> VonMisesMsg {
    a.combine(b, op)
}

/// Von Mises whose log-density curvature in `theta` at `mode_theta` equals
/// `-neg_curvature`.
pub fn vm_from_laplace(mode_theta: f64, neg_curvature: f64) -> Result<VonMisesMsg> {
    if neg_curvature.is_nan() || neg_curvature <= 0.0 || neg_curvature.is_infinite() {
        return Err(Error::NonPositiveCurvature(neg_curvature));
    }
    Ok(VonMisesMsg::new(PI * mode_theta, neg_curvature / (PI * PI)))
}
