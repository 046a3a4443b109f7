//! Exact spherical-wavefront LoS channel, one-snapshot synthesis and the
//! planar-wave model seen by a single subarray.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{AoaPair, ArrayGeometry, PartitionPlan, SubarrayShape, Vec3, centered_indices};

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub p_u: Vec3,
    pub beta: Complex64,
    pub pilot: Complex64,
    pub noise_var: f64,
    pub rng_seed: u64,
}

impl Scene {
    /// Unit gain, unit pilot, noiseless.
    pub fn new(p_u: Vec3) -> Self {
        Self {
            p_u,
            beta: Complex64::new(1.0, 0.0),
            pilot: Complex64::new(1.0, 0.0),
            noise_var: 0.0,
            rng_seed: 0,
        }
    }

    pub fn with_noise(mut self, noise_var: f64, rng_seed: u64) -> Self {
        self.noise_var = noise_var;
        self.rng_seed = rng_seed;
        self
    }
}

/// Free-space channel coefficient for a link of length `r`.
#[inline]
pub fn link_coefficient(beta: Complex64, r: f64, lambda: f64) -> Complex64 {
    beta * (lambda / (4.0 * PI * r)) * Complex64::from_polar(1.0, -2.0 * PI * r / lambda)
}

/// Channel between the user and every antenna, using exact link distances.
pub fn near_field_channel(geometry: &ArrayGeometry, scene: &Scene) -> Result<Vec<Complex64>> {
    geometry
        .positions
        .iter()
        .map(|p| {
            let r = (p - scene.p_u).norm();
            if r == 0.0 {
                Err(Error::ZeroDistance([p.x, p.y, p.z]))
            } else {
                Ok(link_coefficient(scene.beta, r, geometry.lambda))
            }
        })
        .collect()
}

/// Received vector together with its per-subarray slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub y: Vec<Complex64>,
    pub slices: Vec<Vec<Complex64>>,
}

impl Snapshot {
    pub fn from_vector(y: Vec<Complex64>, plan: &PartitionPlan) -> Result<Self> {
        let expected: usize = plan.index_map.iter().map(Vec::len).sum();
        if y.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: y.len(),
            });
        }
        let slices = plan
            .index_map
            .iter()
            .map(|members| members.iter().map(|&k| y[k]).collect())
            .collect();
        Ok(Self { y, slices })
    }

    /// Scatters the slices back into a full-array vector.
    pub fn reassemble(&self, plan: &PartitionPlan) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.y.len()];
        for (members, slice) in plan.index_map.iter().zip(&self.slices) {
            for (&k, &v) in members.iter().zip(slice) {
                y[k] = v;
            }
        }
        y
    }
}

/// `y = h x + n` with i.i.d. circularly-symmetric Gaussian noise of variance
/// `scene.noise_var`, drawn from a generator seeded with `scene.rng_seed`.
pub fn synthesize_snapshot(h: &[Complex64], scene: &Scene, plan: &PartitionPlan) -> Result<Snapshot> {
    let std = (scene.noise_var / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    let y = h
        .iter()
        .map(|&hk| {
            let clean = hk * scene.pilot;
            if std > 0.0 {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                clean + Complex64::new(std * re, std * im)
            } else {
                clean
            }
        })
        .collect();
    Snapshot::from_vector(y, plan)
}

/// One-axis far-field response `exp(j 2 pi p d theta / lambda)` over the centered index set.
pub fn steering_vector_1d(n: usize, d: f64, lambda: f64, theta: f64) -> Vec<Complex64> {
    let k = 2.0 * PI * d * theta / lambda;
    centered_indices(n)
        .map(|p| Complex64::from_polar(1.0, k * p))
        .collect()
}

/// Planar-wave response of a subarray, flattened row-major over local (p, q).
///
/// This is the Kronecker product of the x-axis and y-axis vectors.
pub fn steering_vector(shape: &SubarrayShape, aoa: AoaPair) -> Result<Vec<Complex64>> {
    if !(aoa.theta_x.abs() <= 1.0 && aoa.theta_y.abs() <= 1.0) {
        return Err(Error::DirectionOutOfRange(aoa.theta_x, aoa.theta_y));
    }
    let ax = steering_vector_1d(shape.n_x, shape.d_x, shape.lambda, aoa.theta_x);
    let ay = steering_vector_1d(shape.n_y, shape.d_y, shape.lambda, aoa.theta_y);
    Ok(ax
        .iter()
        .flat_map(|&u| ay.iter().map(move |&v| u * v))
        .collect())
}

/// Complex gain and AoA describing one subarray's received signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubarrayFarFieldModel {
    pub alpha: Complex64,
    pub aoa: AoaPair,
}

impl SubarrayFarFieldModel {
    pub fn predict(&self, shape: &SubarrayShape) -> Result<Vec<Complex64>> {
        Ok(steering_vector(shape, self.aoa)?
            .into_iter()
            .map(|a| self.alpha * a)
            .collect())
    }
}

/// Noise variance giving a per-antenna average receive SNR of `snr_db`.
pub fn snr_to_noise_var(h: &[Complex64], pilot: Complex64, snr_db: f64) -> f64 {
    let power: f64 = h.iter().map(|&hk| (hk * pilot).norm_sqr()).sum();
    power / (h.len() as f64 * 10f64.powf(snr_db / 10.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PROPAGATION_SPEED, subarray_aoa};
    use proptest::prelude::*;

    const LAMBDA: f64 = PROPAGATION_SPEED / 28.0e9;

    fn quarter_wave_setup() -> (ArrayGeometry, PartitionPlan) {
        let d = LAMBDA / 4.0;
        let g = ArrayGeometry::uniform_planar(30, 30, d, d, LAMBDA).unwrap();
        let plan = PartitionPlan::new(&g, 3, 3).unwrap();
        (g, plan)
    }

    fn wrap(x: f64) -> f64 {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn single_antenna_phase_wraps() {
        let g = ArrayGeometry::uniform_planar(1, 1, 1.0, 1.0, LAMBDA).unwrap();
        let h = near_field_channel(&g, &Scene::new(Vec3::new(0.0, 0.0, LAMBDA))).unwrap();
        assert!((h[0] - Complex64::new(1.0 / (4.0 * PI), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn coincident_user_is_rejected() {
        let g = ArrayGeometry::uniform_planar(3, 3, 0.01, 0.01, LAMBDA).unwrap();
        let on_antenna = g.positions[0];
        assert!(matches!(
            near_field_channel(&g, &Scene::new(on_antenna)),
            Err(Error::ZeroDistance(_))
        ));
    }

    #[test]
    fn corners_share_channel_on_boresight() {
        let g = ArrayGeometry::uniform_planar(3, 3, 0.01, 0.01, LAMBDA).unwrap();
        let h = near_field_channel(&g, &Scene::new(Vec3::new(0.0, 0.0, 1.0))).unwrap();
        for k in [2, 6, 8] {
            assert_eq!(h[0], h[k]);
        }
        for k in [3, 5, 7] {
            assert_eq!(h[1], h[k]);
        }
    }

    proptest! {
        #[test]
        fn channel_modulus_and_phase(
            x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.1f64..5.0,
            br in -2.0f64..2.0, bi in -2.0f64..2.0,
        ) {
            let (g, _) = quarter_wave_setup();
            let beta = Complex64::new(br, bi);
            prop_assume!(beta.norm() > 1e-3);
            let mut scene = Scene::new(Vec3::new(x, y, z));
            scene.beta = beta;
            let h = near_field_channel(&g, &scene).unwrap();
            for (p, hk) in g.positions.iter().zip(&h) {
                let r = (p - scene.p_u).norm();
                let expect = beta.norm() * LAMBDA / (4.0 * PI * r);
                prop_assert!(((hk.norm() - expect) / expect).abs() < 1e-12);
                let phase = wrap(hk.arg() - beta.arg() + 2.0 * PI * r / LAMBDA);
                prop_assert!(phase.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_snapshot_is_exact() {
        let (g, plan) = quarter_wave_setup();
        let mut scene = Scene::new(Vec3::new(0.2, -0.1, 1.5));
        scene.pilot = Complex64::new(0.6, 0.8);
        let h = near_field_channel(&g, &scene).unwrap();
        let snap = synthesize_snapshot(&h, &scene, &plan).unwrap();
        for (y, hk) in snap.y.iter().zip(&h) {
            assert_eq!(*y, hk * scene.pilot);
        }
    }

    #[test]
    fn snapshot_is_deterministic_given_seed() {
        let (g, plan) = quarter_wave_setup();
        let scene = Scene::new(Vec3::new(0.0, 0.0, 2.0)).with_noise(1e-6, 42);
        let h = near_field_channel(&g, &scene).unwrap();
        let a = synthesize_snapshot(&h, &scene, &plan).unwrap();
        let b = synthesize_snapshot(&h, &scene, &plan).unwrap();
        assert_eq!(a, b);
        let c = synthesize_snapshot(&h, &scene.clone().with_noise(1e-6, 43), &plan).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn empirical_noise_variance() {
        let g = ArrayGeometry::uniform_planar(100, 1000, 1.0, 1.0, 1.0).unwrap();
        let plan = PartitionPlan::new(&g, 1, 1).unwrap();
        let h = vec![Complex64::new(0.0, 0.0); g.num_antennas()];
        let sigma2 = 0.37;
        let scene = Scene::new(Vec3::new(0.0, 0.0, 1.0)).with_noise(sigma2, 9);
        let snap = synthesize_snapshot(&h, &scene, &plan).unwrap();
        let var = snap.y.iter().map(|v| v.norm_sqr()).sum::<f64>() / snap.y.len() as f64;
        assert!(((var - sigma2) / sigma2).abs() < 0.02, "{var}");
        // circular symmetry: real and imaginary parts carry half each
        let re = snap.y.iter().map(|v| v.re * v.re).sum::<f64>() / snap.y.len() as f64;
        assert!(((re - sigma2 / 2.0) / (sigma2 / 2.0)).abs() < 0.03);
    }

    #[test]
    fn slicing_round_trip() {
        let g = ArrayGeometry::uniform_planar(12, 8, 0.1, 0.1, 0.3).unwrap();
        for (mx, my) in [(1, 1), (3, 2), (4, 4), (12, 8)] {
            let plan = PartitionPlan::new(&g, mx, my).unwrap();
            let y: Vec<Complex64> = (0..96).map(|k| Complex64::new(k as f64, -(k as f64))).collect();
            let snap = Snapshot::from_vector(y.clone(), &plan).unwrap();
            assert_eq!(snap.reassemble(&plan), y);
        }
        let plan = PartitionPlan::new(&g, 2, 2).unwrap();
        assert!(Snapshot::from_vector(vec![Complex64::new(0.0, 0.0); 5], &plan).is_err());
    }

    #[test]
    fn steering_vector_basics() {
        let shape = SubarrayShape { n_x: 4, n_y: 5, d_x: 0.004, d_y: 0.005, lambda: LAMBDA };
        let ones = steering_vector(&shape, AoaPair::new(0.0, 0.0)).unwrap();
        assert!(ones.iter().all(|a| (a - Complex64::new(1.0, 0.0)).norm() < 1e-15));

        let aoa = AoaPair::new(0.31, -0.52);
        let a = steering_vector(&shape, aoa).unwrap();
        assert!(a.iter().all(|v| (v.norm() - 1.0).abs() < 1e-14));
        let ax = steering_vector_1d(4, 0.004, LAMBDA, 0.31);
        let ay = steering_vector_1d(5, 0.005, LAMBDA, -0.52);
        for p in 0..4 {
            for q in 0..5 {
                assert!((a[p * 5 + q] - ax[p] * ay[q]).norm() < 1e-14);
            }
        }
        let neg = steering_vector(&shape, AoaPair::new(-0.31, 0.52)).unwrap();
        for (u, v) in a.iter().zip(&neg) {
            assert!((u.conj() - v).norm() < 1e-14);
        }
        assert!(steering_vector(&shape, AoaPair::new(1.2, 0.0)).is_err());
    }

    /// Largest phase gap between the exact channel (referenced to the subarray
    /// center) and the planar-wave model, over all antennas of one subarray.
    fn max_far_field_phase_error(g: &ArrayGeometry, plan: &PartitionPlan, m: usize, p_u: Vec3) -> f64 {
        let shape = plan.subarray_shape(g);
        let scene = Scene::new(p_u);
        let h = near_field_channel(g, &scene).unwrap();
        let center = plan.centers[m];
        let r_m = (center - p_u).norm();
        let h_m = link_coefficient(scene.beta, r_m, g.lambda);
        let a = steering_vector(&shape, subarray_aoa(&center, &p_u).unwrap()).unwrap();
        plan.index_map[m]
            .iter()
            .zip(&a)
            .map(|(&k, &ak)| wrap((h[k] / (h_m * ak)).arg()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn far_field_error_shrinks_with_distance() {
        let d = LAMBDA / 2.0;
        let g = ArrayGeometry::uniform_planar(36, 36, d, d, LAMBDA).unwrap();
        let plan = PartitionPlan::new(&g, 6, 6).unwrap();
        let rf = plan.sub_fraunhofer;
        for m in [0, 14, 35] {
            let c = plan.centers[m];
            // boresight of the subarray, at and beyond its Fraunhofer distance
            for scale in [1.0, 1.5, 4.0] {
                let err = max_far_field_phase_error(&g, &plan, m, c + Vec3::new(0.0, 0.0, scale * rf));
                assert!(err <= PI / 8.0 / scale + 1e-12, "m={m} scale={scale} err={err}");
            }
            // off-boresight at ten Fraunhofer distances
            for (az, el) in [(0.0, 0.5), (1.2, 0.9), (-2.5, 0.3)] {
                let p = c + crate::geometry::spherical_to_cartesian(10.0 * rf, az, el);
                let err = max_far_field_phase_error(&g, &plan, m, p);
                assert!(err < PI / 8.0 / 10.0, "m={m} err={err}");
            }
        }
    }

    #[test]
    fn snr_scaling() {
        let h: Vec<Complex64> = (0..10).map(|k| Complex64::new(k as f64, 1.0)).collect();
        let pilot = Complex64::new(0.0, 2.0);
        let p: f64 = h.iter().map(|v| (v * pilot).norm_sqr()).sum();
        let s0 = snr_to_noise_var(&h, pilot, 0.0);
        assert!((s0 - p / 10.0).abs() < 1e-12);
        assert!((snr_to_noise_var(&h, pilot, 10.0) - s0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn snr_round_trip_on_quarter_wave_geometry() {
        let (g, plan) = quarter_wave_setup();
        let base = Scene::new(Vec3::new(0.3, 0.2, 2.4));
        let h = near_field_channel(&g, &base).unwrap();
        let sigma2 = snr_to_noise_var(&h, base.pilot, 20.0);
        let signal: f64 = h.iter().map(|v| v.norm_sqr()).sum();
        let mut noise = 0.0;
        let trials = 400;
        for seed in 0..trials {
            let snap = synthesize_snapshot(&h, &base.clone().with_noise(sigma2, seed), &plan).unwrap();
            noise += snap.y.iter().zip(&h).map(|(y, hk)| (y - hk).norm_sqr()).sum::<f64>();
        }
        let snr = signal / (noise / trials as f64);
        assert!((snr / 100.0 - 1.0).abs() < 0.01, "{snr}");
    }
}
