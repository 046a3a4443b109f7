//! The outer estimation loop: per-subarray AoA estimation, fusion of the
//! extrinsic AoA messages into a location belief, and leave-one-out feedback
//! that becomes the next round of AoA priors.

use std::time::Instant;

use rayon::prelude::*;

use crate::aoa::{AoaEstimator, AoaPosterior, EstimatorConfig, extrinsic_message};
use crate::channel::{Scene, Snapshot, near_field_channel, snr_to_noise_var, synthesize_snapshot};
use crate::error::{Error, Result};
use crate::fusion::{
    AoaFactor, GaussianBelief3D, InitGrid, MapConfig, belief_covariance, feedback_message, initial_location,
    location_log_belief, map_location, map_location_excluding,
};
use crate::geometry::{ArrayGeometry, Axis, PartitionPlan, SubarrayShape, Vec3, spherical_to_cartesian};
use crate::vonmises::VonMisesMsg;

#[derive(Debug, Clone, PartialEq)]
pub struct ApleConfig {
    /// Outer iterations.
    pub n1: usize,
    pub estimator: EstimatorConfig,
    pub map: MapConfig,
    /// Points per axis of the fallback initializer grid, used when the first
    /// AoA estimates cannot be triangulated.
    pub init_points: usize,
    /// Weight of the previous prior when damping feedback messages.
    pub damping: f64,
    /// Stop early when successive estimates move less than this (meters).
    pub move_tol: f64,
    /// Divergence radius as a multiple of the array's Fraunhofer distance.
    pub divergence_factor: f64,
    /// Run the per-subarray and per-factor stages on the rayon pool.
    pub parallel: bool,
}

impl Default for ApleConfig {
    fn default() -> Self {
        Self {
            n1: 5,
            estimator: EstimatorConfig::default(),
            map: MapConfig::default(),
            init_points: 20,
            damping: 0.5,
            move_tol: 1e-6,
            divergence_factor: 100.0,
            parallel: false,
        }
    }
}

impl ApleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 {
            return Err(Error::InvalidConfig("n1 must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidConfig(format!("damping {} outside [0, 1)", self.damping)));
        }
        if self.init_points == 0 {
            return Err(Error::InvalidConfig("init_points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationEstimate {
    pub p_hat: Vec3,
    pub belief: GaussianBelief3D,
    pub per_subarray: Vec<AoaPosterior>,
    /// The 2M extrinsic AoA factors of the last iteration, two per subarray.
    pub factors: Vec<AoaFactor>,
    pub iterations_run: usize,
    /// False if any AoA refinement or the final ascent failed, or the belief
    /// is degenerate in some direction.
    pub converged: bool,
}

fn estimate_all(
    snapshot: &Snapshot,
    priors: &[[VonMisesMsg; 2]],
    shape: &SubarrayShape,
    noise_var: f64,
    config: &ApleConfig,
) -> Result<Vec<AoaPosterior>> {
    let run = |est: &mut AoaEstimator, m: usize| {
        est.estimate(&snapshot.slices[m], priors[m][0], priors[m][1], shape, noise_var)
    };
    if config.parallel {
        (0..priors.len())
            .into_par_iter()
            .map_init(|| AoaEstimator::new(config.estimator.clone()), run)
            .collect()
    } else {
        let mut est = AoaEstimator::new(config.estimator.clone());
        (0..priors.len()).map(|m| run(&mut est, m)).collect()
    }
}

/// Feedback prior for factor `k` from the belief that excludes it.
fn feedback_for(
    factors: &[AoaFactor],
    k: usize,
    p_full: Vec3,
    full_eval: &crate::fusion::BeliefEval,
    map: &MapConfig,
) -> Result<VonMisesMsg> {
    let loo = map_location_excluding(factors, k, p_full, full_eval, map)?;
    let belief = belief_covariance(&loo.p, factors, Some(k))?;
    feedback_message(factors[k].axis, &belief, &factors[k].center)
}

/// Estimates the user location from one snapshot.
pub fn run_aple(
    snapshot: &Snapshot,
    plan: &PartitionPlan,
    geometry: &ArrayGeometry,
    noise_var: f64,
    config: &ApleConfig,
) -> Result<LocationEstimate> {
    config.validate()?;
    if snapshot.slices.len() != plan.m_count() {
        return Err(Error::LengthMismatch {
            expected: plan.m_count(),
            actual: snapshot.slices.len(),
        });
    }
    let shape = plan.subarray_shape(geometry);
    let bounds = geometry.field_boundaries();
    let map = MapConfig {
        divergence_radius: config.map.divergence_radius.min(config.divergence_factor * bounds.fraunhofer),
        ..config.map.clone()
    };
    let grid = InitGrid {
        n_r: config.init_points,
        n_dir: config.init_points,
        ..InitGrid::new(bounds.fresnel / 2.0, 2.0 * bounds.fraunhofer)
    };

    let m_count = plan.m_count();
    let mut priors = vec![[VonMisesMsg::uniform(); 2]; m_count];
    let mut p_hat: Option<Vec3> = None;
    let mut posts = Vec::new();
    let mut factors = Vec::new();
    let mut map_converged = false;
    let mut iterations_run = 0;

    for it in 0..config.n1 {
        iterations_run = it + 1;
        posts = estimate_all(snapshot, &priors, &shape, noise_var, config)?;
        factors = posts
            .iter()
            .zip(&priors)
            .enumerate()
            .flat_map(|(m, (post, prior))| {
                Axis::BOTH.map(|axis| {
                    AoaFactor::new(
                        plan.centers[m],
                        axis,
                        extrinsic_message(&post.posterior(axis), &prior[axis.index()]),
                    )
                })
            })
            .collect();

        let init = p_hat.unwrap_or_else(|| initial_location(&factors, &grid));
        let full = map_location(&factors, None, init, &map)?;
        map_converged = full.converged;
        let settled = p_hat.is_some_and(|prev| (full.p - prev).norm() < config.move_tol);
        p_hat = Some(full.p);
        if settled || it + 1 == config.n1 {
            break;
        }

        let full_eval = location_log_belief(&full.p, &factors, None)?;
        let fresh: Vec<VonMisesMsg> = if config.parallel {
            (0..factors.len())
                .into_par_iter()
                .map(|k| feedback_for(&factors, k, full.p, &full_eval, &map))
                .collect::<Result<_>>()?
        } else {
            (0..factors.len())
                .map(|k| feedback_for(&factors, k, full.p, &full_eval, &map))
                .collect::<Result<_>>()?
        };
        for (k, msg) in fresh.into_iter().enumerate() {
            let slot = &mut priors[k / 2][k % 2];
            *slot = msg.damped(slot, config.damping);
        }
    }

    let p_hat = p_hat.expect("at least one iteration runs");
    let belief = belief_covariance(&p_hat, &factors, None)?;
    let converged = map_converged && !belief.ill_conditioned && posts.iter().all(|p| p.converged);
    Ok(LocationEstimate {
        p_hat,
        belief,
        per_subarray: posts,
        factors,
        iterations_run,
        converged,
    })
}

/// One array size for [`complexity_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSize {
    /// Antennas per side (square array).
    pub n_side: usize,
    /// Subarray side length in antennas.
    pub sub_side: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub n_side: usize,
    pub n_antennas: usize,
    pub m: usize,
    pub median_s: f64,
}

/// Median wall time of [`run_aple`] for each size, on a fixed user at `range`
/// meters and the given SNR. Only estimator execution is timed. Early exit is
/// disabled so every size runs exactly `config.n1` outer iterations.
#[allow(clippy::too_many_arguments)]
pub fn complexity_probe(
    config: &ApleConfig,
    sizes: &[ProbeSize],
    lambda: f64,
    range: f64,
    snr_db: f64,
    runs: usize,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let runs = runs.max(5);
    let config = &ApleConfig {
        move_tol: 0.0,
        ..config.clone()
    };
    let p_u = spherical_to_cartesian(range, 0.4, 0.3);
    sizes
        .iter()
        .map(|s| {
            if s.sub_side == 0 || s.n_side % s.sub_side != 0 {
                return Err(Error::NonDivisiblePartition {
                    axis: 'x',
                    count: s.n_side,
                    blocks: s.sub_side,
                });
            }
            let d = s.spacing * lambda;
            let g = ArrayGeometry::uniform_planar(s.n_side, s.n_side, d, d, lambda)?;
            let blocks = s.n_side / s.sub_side;
            let plan = PartitionPlan::new(&g, blocks, blocks)?;
            let clean = Scene::new(p_u);
            let h = near_field_channel(&g, &clean)?;
            let noise_var = snr_to_noise_var(&h, clean.pilot, snr_db);
            let mut times = Vec::with_capacity(runs);
            for r in 0..runs {
                let scene = clean.clone().with_noise(noise_var, seed.wrapping_add(r as u64));
                let snap = synthesize_snapshot(&h, &scene, &plan)?;
                let start = Instant::now();
                std::hint::black_box(run_aple(&snap, &plan, &g, noise_var, config)?);
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            Ok(ProbeRow {
                n_side: s.n_side,
                n_antennas: g.num_antennas(),
                m: plan.m_count(),
                median_s: times[times.len() / 2],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ApleConfig::default().validate().is_ok());
        assert!(ApleConfig { n1: 0, ..Default::default() }.validate().is_err());
        assert!(ApleConfig { damping: 1.0, ..Default::default() }.validate().is_err());
        assert!(ApleConfig { damping: 0.0, ..Default::default() }.validate().is_ok());
    }
}
