//! Monte Carlo sweeps over range, SNR and trials.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use aple_core::aple::{ProbeSize, complexity_probe, run_aple};
use aple_core::baselines::{OmpConfig, PolarGrid, mle_grid_oracle, omp_polar};
use aple_core::channel::{Scene, near_field_channel, snr_to_noise_var, synthesize_snapshot};
use aple_core::geometry::{ArrayGeometry, cartesian_to_spherical, spherical_to_cartesian};
use aple_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::HarnessError;

pub const CSV_HEADER: &str = "estimator,n_x,m,r,snr_db,trial,err2,pnorm2,time_s,converged";

/// One estimator run on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub estimator: String,
    pub n_x: usize,
    pub m: usize,
    /// User range (m).
    pub r: f64,
    pub snr_db: f64,
    pub trial: usize,
    #[serde(rename = "err2")]
    pub error_sq_norm: f64,
    #[serde(rename = "pnorm2")]
    pub p_norm_sq: f64,
    #[serde(rename = "time_s")]
    pub wall_time_s: f64,
    pub converged: bool,
}

impl ResultRow {
    /// True when the estimator returned an error instead of an estimate.
    pub fn failed(&self) -> bool {
        self.error_sq_norm.is_nan()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Noise seed of one (SNR, trial) cell.
pub fn trial_seed(master: u64, snr_index: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ snr_index as u64) ^ (trial as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Seed of a trial's user direction; shared by every SNR and range.
pub fn scene_seed(master: u64, trial: usize) -> u64 {
    splitmix64(splitmix64(master ^ 0x5ce7_e5ee_d000_0000) ^ trial as u64)
}

/// Azimuth and elevation drawn uniformly over the spherical cap of
/// half-angle `cone_deg` around boresight.
pub fn sample_direction(seed: u64, cone_deg: f64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cos_min = cone_deg.to_radians().cos();
    let cos_el: f64 = rng.random_range(cos_min..=1.0);
    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    (az, cos_el.clamp(-1.0, 1.0).acos())
}

/// Baseline search window: the global lattice (origin at half the Fresnel
/// distance) restricted to a box around the true user.
pub fn baseline_grid(cfg: &ExperimentConfig, geometry: &ArrayGeometry, p_u: &Vec3) -> aple_core::Result<PolarGrid> {
    let (r, az, el) = cartesian_to_spherical(p_u);
    let half = cfg.grid_window_deg.to_radians();
    PolarGrid::lattice_window(
        (r, az, el),
        (cfg.grid_window_r, half, half),
        geometry.field_boundaries().fresnel / 2.0,
        cfg.grid_r_step,
        cfg.grid_angle_step_deg.to_radians(),
    )
}

struct Task {
    range_idx: usize,
    snr_idx: usize,
    trial: usize,
}

pub fn build_pool(threads: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

/// Runs every (range, SNR, trial, estimator) combination of the config.
/// Estimator errors become rows with NaN error and `converged = false`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>, HarnessError> {
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let plan = cfg.plan(&geometry)?;
    let ranges = match cfg.user_point() {
        Some(p) => vec![p.norm()],
        None => cfg.ranges_m(&geometry, &plan),
    };
    let aple_cfg = cfg.aple_config();
    let omp_cfg = OmpConfig {
        budget_bytes: cfg.omp_budget_bytes,
        ..OmpConfig::default()
    };

    let mut tasks = Vec::new();
    for range_idx in 0..ranges.len() {
        for snr_idx in 0..cfg.snr_db.len() {
            for trial in 0..cfg.trials {
                tasks.push(Task { range_idx, snr_idx, trial });
            }
        }
    }

    let run_task = |t: &Task| -> Result<Vec<ResultRow>, HarnessError> {
        let p_u = match cfg.user_point() {
            Some(p) => p,
            None => {
                let (az, el) = sample_direction(scene_seed(cfg.seed, t.trial), cfg.cone_deg);
                spherical_to_cartesian(ranges[t.range_idx], az, el)
            }
        };
        let snr = cfg.snr_db[t.snr_idx];
        let clean = Scene::new(p_u);
        let h = near_field_channel(&geometry, &clean)?;
        let noise_var = if snr.is_infinite() { 0.0 } else { snr_to_noise_var(&h, clean.pilot, snr) };
        let scene = clean.with_noise(noise_var, trial_seed(cfg.seed, t.snr_idx, t.trial));
        let snap = synthesize_snapshot(&h, &scene, &plan)?;

        let mut rows = Vec::with_capacity(cfg.estimators.len());
        for &kind in &cfg.estimators {
            let start = Instant::now();
            let outcome: Result<(Vec3, bool), aple_core::Error> = match kind {
                EstimatorKind::Aple => {
                    run_aple(&snap, &plan, &geometry, noise_var, &aple_cfg).map(|e| (e.p_hat, e.converged))
                }
                EstimatorKind::Mle | EstimatorKind::Omp => {
                    let found = baseline_grid(cfg, &geometry, &p_u).and_then(|grid| {
                        if kind == EstimatorKind::Mle {
                            mle_grid_oracle(&snap.y, &geometry, &grid)
                        } else {
                            omp_polar(&snap.y, &geometry, &grid, &omp_cfg)
                        }
                    });
                    found.map(|p| (p, true))
                }
            };
            let elapsed = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            let (err2, converged) = match outcome {
                Ok((p_hat, conv)) => ((p_hat - p_u).norm_squared(), conv),
                Err(_) => (f64::NAN, false),
            };
            rows.push(ResultRow {
                estimator: kind.name().to_string(),
                n_x: cfg.n_x,
                m: plan.m_count(),
                r: ranges[t.range_idx],
                snr_db: snr,
                trial: t.trial,
                error_sq_norm: err2,
                p_norm_sq: p_u.norm_squared(),
                wall_time_s: elapsed,
                converged,
            });
        }
        Ok(rows)
    };

    let pool = build_pool(cfg.threads)?;
    let per_task: Vec<Result<Vec<ResultRow>, HarnessError>> = pool.install(|| tasks.par_iter().map(run_task).collect());
    let mut rows = Vec::with_capacity(tasks.len() * cfg.estimators.len());
    for r in per_task {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Aggregate of one (estimator, n_x, m, r, snr) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub estimator: String,
    pub n_x: usize,
    pub m: usize,
    pub r: f64,
    pub snr_db: f64,
    pub trials: usize,
    pub failures: usize,
    /// `10 log10(mean ||p_hat - p||^2 / mean ||p||^2)` over successful trials.
    pub nmse_db: f64,
    /// Median over trials of `10 log10(||p_hat - p||^2 / ||p||^2)`.
    pub median_db: f64,
}

type CellKey = (String, usize, usize, u64, u64);

/// Groups rows into cells. Sums run in trial order, so the result does not
/// depend on how rows are ordered.
pub fn aggregate(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let key = (row.estimator.clone(), row.n_x, row.m, row.r.to_bits(), row.snr_db.to_bits());
        cells.entry(key).or_default().push(row);
    }
    let mut out: Vec<CellSummary> = cells
        .into_values()
        .map(|mut group| {
            group.sort_by_key(|r| r.trial);
            let ok: Vec<&&ResultRow> = group.iter().filter(|r| !r.failed()).collect();
            let err: f64 = ok.iter().map(|r| r.error_sq_norm).sum();
            let pow: f64 = ok.iter().map(|r| r.p_norm_sq).sum();
            let mut per_trial: Vec<f64> =
                ok.iter().map(|r| 10.0 * (r.error_sq_norm / r.p_norm_sq).log10()).collect();
            per_trial.sort_by(f64::total_cmp);
            let first = group[0];
            CellSummary {
                estimator: first.estimator.clone(),
                n_x: first.n_x,
                m: first.m,
                r: first.r,
                snr_db: first.snr_db,
                trials: group.len(),
                failures: group.len() - ok.len(),
                nmse_db: if ok.is_empty() { f64::NAN } else { 10.0 * (err / pow).log10() },
                median_db: median(&per_trial),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.estimator
            .cmp(&b.estimator)
            .then(a.n_x.cmp(&b.n_x))
            .then(a.m.cmp(&b.m))
            .then(a.r.total_cmp(&b.r))
            .then(a.snr_db.total_cmp(&b.snr_db))
    });
    out
}

/// Median of sorted values; NaN when empty.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

pub fn write_rows<W: Write>(writer: W, rows: &[ResultRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(reader);
    let rows = r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_x: usize,
    pub n_b: usize,
    pub m: usize,
    pub median_s: f64,
}

/// Median APLE runtime for each configured array size.
pub fn run_scaling(cfg: &ExperimentConfig) -> Result<Vec<ScalingRow>, HarnessError> {
    cfg.validate_scaling()?;
    let sizes: Vec<ProbeSize> = cfg
        .sizes
        .iter()
        .zip(&cfg.sub_sizes)
        .map(|(&n_side, &sub_side)| ProbeSize {
            n_side,
            sub_side,
            spacing: cfg.spacing,
        })
        .collect();
    let range = cfg.ranges.first().copied().or(cfg.user_point().map(|p| p.norm())).unwrap_or(2.0);
    let snr = cfg.snr_db.first().copied().unwrap_or(20.0);
    let rows = complexity_probe(&cfg.aple_config(), &sizes, cfg.lambda(), range, snr, cfg.scaling_runs, cfg.seed)?;
    Ok(rows
        .into_iter()
        .map(|r| ScalingRow {
            n_x: r.n_side,
            n_b: r.n_antennas,
            m: r.m,
            median_s: r.median_s,
        })
        .collect())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn write_scaling<W: Write>(writer: W, rows: &[ScalingRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_pure_and_distinct() {
        assert_eq!(trial_seed(7, 1, 2), trial_seed(7, 1, 2));
        assert_ne!(trial_seed(7, 1, 2), trial_seed(7, 2, 1));
        assert_ne!(trial_seed(7, 0, 0), trial_seed(8, 0, 0));
        assert_ne!(scene_seed(7, 0), scene_seed(7, 1));
    }

    #[test]
    fn directions_stay_in_the_cone() {
        for t in 0..500 {
            let (_, el) = sample_direction(scene_seed(3, t), 30.0);
            assert!((0.0..=30f64.to_radians() + 1e-12).contains(&el));
        }
        assert_eq!(sample_direction(5, 0.0).1, 0.0);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.2)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.2).abs() < 1e-12);
    }

    fn row(trial: usize, err2: f64) -> ResultRow {
        ResultRow {
            estimator: "aple".into(),
            n_x: 30,
            m: 9,
            r: 2.0,
            snr_db: 20.0,
            trial,
            error_sq_norm: err2,
            p_norm_sq: 4.0,
            wall_time_s: 0.0,
            converged: true,
        }
    }

    #[test]
    fn aggregation_ignores_row_order_and_failures() {
        let rows = vec![row(0, 1e-3), row(1, 3e-3), row(2, f64::NAN), row(3, 2e-4)];
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let a = aggregate(&rows);
        let b = aggregate(&shuffled);
        assert_eq!(a, b);
        assert_eq!(a[0].failures, 1);
        let expect = 10.0 * ((1e-3 + 3e-3 + 2e-4) / 12.0f64).log10();
        assert!((a[0].nmse_db - expect).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut rows = vec![row(0, 1.234_567_890_123e-7), row(1, f64::NAN)];
        rows[1].snr_db = f64::INFINITY;
        rows[1].converged = false;
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].failed());
        assert_eq!(back[1].snr_db, f64::INFINITY);
    }
}
