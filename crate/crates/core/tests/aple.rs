use std::time::Instant;

use aple_core::aoa::{EstimatorConfig, estimate_posterior};
use aple_core::aple::{ApleConfig, LocationEstimate, run_aple};
use aple_core::channel::{Scene, Snapshot, near_field_channel, snr_to_noise_var, synthesize_snapshot};
use aple_core::fusion::{HESSIAN_EIGEN_FLOOR, location_log_belief};
use aple_core::geometry::{ArrayGeometry, PROPAGATION_SPEED, PartitionPlan, Vec3, spherical_to_cartesian};
use aple_core::vonmises::VonMisesMsg;
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDA: f64 = PROPAGATION_SPEED / 28.0e9;

fn setup(n: usize, spacing: f64, blocks: usize) -> (ArrayGeometry, PartitionPlan) {
    let d = spacing * LAMBDA;
    let g = ArrayGeometry::uniform_planar(n, n, d, d, LAMBDA).unwrap();
    let plan = PartitionPlan::new(&g, blocks, blocks).unwrap();
    (g, plan)
}

fn snapshot(g: &ArrayGeometry, plan: &PartitionPlan, p: Vec3, snr_db: Option<f64>, seed: u64) -> (Snapshot, f64) {
    let clean = Scene::new(p);
    let h = near_field_channel(g, &clean).unwrap();
    let nv = snr_db.map_or(0.0, |s| snr_to_noise_var(&h, clean.pilot, s));
    (synthesize_snapshot(&h, &clean.with_noise(nv, seed), plan).unwrap(), nv)
}

fn cone_user(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    let el = rng.random_range(0.0..30f64.to_radians());
    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    spherical_to_cartesian(r, az, el)
}

fn err_db(est: &LocationEstimate, p: &Vec3) -> f64 {
    10.0 * ((est.p_hat - p).norm_squared() / p.norm_squared()).log10()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[test]
fn single_subarray_is_flagged() {
    let (g, plan) = setup(30, 0.25, 1);
    let p = spherical_to_cartesian(1.5, 0.3, 0.2);
    let (snap, nv) = snapshot(&g, &plan, p, Some(20.0), 1);
    let est = run_aple(&snap, &plan, &g, nv, &ApleConfig::default()).unwrap();
    assert!(!est.converged);
    assert!(est.belief.ill_conditioned);
    let top = SymmetricEigen::new(est.belief.cov).eigenvalues.max();
    assert!((top * HESSIAN_EIGEN_FLOOR - 1.0).abs() < 1e-9);
    // the direction is still right even though the range is not observable
    assert!(est.p_hat.normalize().dot(&p.normalize()) > 1.0 - 1e-4);
}

#[test]
fn noiseless_quarter_wave_array_reaches_minus_40_db() {
    let (g, plan) = setup(30, 0.25, 3);
    let rf = g.field_boundaries().fraunhofer;
    for (az, el) in [(0.0, 0.1), (0.7, 0.3), (-2.1, 0.45), (2.9, 0.2)] {
        let p = spherical_to_cartesian(rf, az, el);
        let (snap, _) = snapshot(&g, &plan, p, None, 0);
        let est = run_aple(&snap, &plan, &g, 0.0, &ApleConfig::default()).unwrap();
        assert!(est.converged);
        assert!(err_db(&est, &p) <= -40.0, "{az},{el}: {:.2} dB", err_db(&est, &p));
    }
}

#[test]
fn first_iteration_uses_prior_free_estimates() {
    let (g, plan) = setup(30, 0.25, 3);
    let p = spherical_to_cartesian(1.2, 0.5, 0.3);
    let (snap, nv) = snapshot(&g, &plan, p, Some(10.0), 4);
    let cfg = ApleConfig { n1: 1, ..Default::default() };
    let est = run_aple(&snap, &plan, &g, nv, &cfg).unwrap();
    let shape = plan.subarray_shape(&g);
    for (m, post) in est.per_subarray.iter().enumerate() {
        let alone = estimate_posterior(
            &snap.slices[m],
            VonMisesMsg::uniform(),
            VonMisesMsg::uniform(),
            &shape,
            nv,
            &EstimatorConfig::default(),
        )
        .unwrap();
        assert_eq!(post, &alone);
    }
}

#[test]
fn final_belief_is_stationary_at_the_estimate() {
    let (g, plan) = setup(30, 0.25, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..10 {
        let r = rng.random_range(0.3..2.4);
        let p = cone_user(&mut rng, r);
        let (snap, nv) = snapshot(&g, &plan, p, Some(20.0), seed);
        let est = run_aple(&snap, &plan, &g, nv, &ApleConfig::default()).unwrap();
        assert_eq!(est.factors.len(), 2 * plan.m_count());
        let eval = location_log_belief(&est.p_hat, &est.factors, None).unwrap();
        assert!(eval.grad.norm() < 1e-6, "seed {seed}: {}", eval.grad.norm());
        let eig = SymmetricEigen::new(est.belief.cov).eigenvalues;
        assert!(eig.min() > 0.0);
    }
}

#[test]
fn runs_are_deterministic_and_parallel_matches_sequential() {
    let (g, plan) = setup(30, 0.25, 3);
    let p = spherical_to_cartesian(0.9, -1.0, 0.35);
    let (snap, nv) = snapshot(&g, &plan, p, Some(15.0), 77);
    let seq = ApleConfig::default();
    let a = run_aple(&snap, &plan, &g, nv, &seq).unwrap();
    let b = run_aple(&snap, &plan, &g, nv, &seq).unwrap();
    assert_eq!(a.p_hat, b.p_hat);
    let par = run_aple(&snap, &plan, &g, nv, &ApleConfig { parallel: true, ..seq }).unwrap();
    assert!((par.p_hat - a.p_hat).norm() < 1e-9);
}

#[test]
fn second_iteration_is_not_worse_in_median() {
    let (g, plan) = setup(30, 0.25, 3);
    let rf = g.field_boundaries().fraunhofer;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut one, mut two) = (Vec::new(), Vec::new());
    for seed in 0..100 {
        let p = cone_user(&mut rng, rf);
        let (snap, nv) = snapshot(&g, &plan, p, Some(20.0), seed);
        for (n1, out) in [(1, &mut one), (2, &mut two)] {
            let est = run_aple(&snap, &plan, &g, nv, &ApleConfig { n1, ..Default::default() }).unwrap();
            out.push(err_db(&est, &p));
        }
    }
    let (m1, m2) = (median(one), median(two));
    assert!(m2 <= m1, "median NMSE n1=2 {m2:.3} dB vs n1=1 {m1:.3} dB");
}

#[test]
fn doubling_outer_iterations_at_most_doubles_runtime() {
    let (g, plan) = setup(30, 0.25, 3);
    let p = spherical_to_cartesian(1.0, 0.2, 0.3);
    let snaps: Vec<_> = (0..30).map(|s| snapshot(&g, &plan, p, Some(20.0), s)).collect();
    // no early exit so that n1 iterations really run
    let cfg = |n1| ApleConfig { n1, move_tol: 0.0, ..Default::default() };
    let time = |n1: usize| {
        let start = Instant::now();
        for (snap, nv) in &snaps {
            let est = run_aple(snap, &plan, &g, *nv, &cfg(n1)).unwrap();
            assert_eq!(est.iterations_run, n1);
        }
        start.elapsed().as_secs_f64()
    };
    let mut ratios = Vec::new();
    for _ in 0..7 {
        let t2 = time(2);
        let t4 = time(4);
        ratios.push(t4 / t2);
    }
    let r = median(ratios);
    assert!(r <= 2.2, "T(n1=4)/T(n1=2) = {r:.2}");
}
