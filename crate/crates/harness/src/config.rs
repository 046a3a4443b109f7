//! Experiment configuration: a flat TOML table. See `configs/` for examples and
//! the README for the full key list.

use std::path::{Path, PathBuf};

use aple_core::Vec3;
use aple_core::geometry::{ArrayGeometry, PartitionPlan, wavelength_from_frequency};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Aple,
    Mle,
    Omp,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Aple => "aple",
            Self::Mle => "mle",
            Self::Omp => "omp",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aple" => Ok(Self::Aple),
            "mle" => Ok(Self::Mle),
            "omp" => Ok(Self::Omp),
            other => Err(HarnessError::Config(format!("unknown estimator '{other}' (expected aple, mle or omp)"))),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>, HarnessError> {
        s.split(',').filter(|t| !t.trim().is_empty()).map(Self::parse).collect()
    }
}

/// Unit of the `ranges` list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeUnit {
    /// Meters.
    M,
    /// Multiples of the full array's Fraunhofer distance.
    Fraunhofer,
    /// Multiples of one subarray's Fraunhofer distance.
    SubFraunhofer,
}

fn default_spacing() -> f64 {
    0.25
}
fn default_freq() -> f64 {
    28e9
}
fn default_range_unit() -> RangeUnit {
    RangeUnit::M
}
fn default_cone() -> f64 {
    30.0
}
fn default_trials() -> usize {
    1
}
fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Aple]
}
fn default_n1() -> usize {
    5
}
fn default_damping() -> f64 {
    0.5
}
fn default_r_step() -> f64 {
    0.1
}
fn default_angle_step() -> f64 {
    0.02
}
fn default_window_r() -> f64 {
    1.0
}
fn default_window_deg() -> f64 {
    0.3
}
fn default_budget() -> u64 {
    aple_core::baselines::DEFAULT_DICTIONARY_BUDGET
}
fn default_true() -> bool {
    true
}
fn default_runs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Antennas along x.
    pub n_x: usize,
    /// Antennas along y; defaults to `n_x`.
    #[serde(default)]
    pub n_y: Option<usize>,
    /// Element spacing in wavelengths.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "default_freq")]
    pub freq_hz: f64,
    /// Overrides `freq_hz` when set (meters).
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Subarray blocks along x.
    pub m_x: usize,
    /// Subarray blocks along y; defaults to `m_x`.
    #[serde(default)]
    pub m_y: Option<usize>,
    /// Fixed user position (meters). Takes precedence over `ranges`.
    #[serde(default)]
    pub user: Option<[f64; 3]>,
    /// User ranges; each trial draws a direction in the cone.
    #[serde(default)]
    pub ranges: Vec<f64>,
    #[serde(default = "default_range_unit")]
    pub range_unit: RangeUnit,
    /// Half-angle of the user direction cone around boresight (degrees).
    #[serde(default = "default_cone")]
    pub cone_deg: f64,
    /// Per-antenna receive SNRs; `inf` means noiseless.
    #[serde(default)]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub plot: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
    /// Record wall times. Disable for byte-reproducible CSV output.
    #[serde(default = "default_true")]
    pub timing: bool,

    #[serde(default = "default_n1")]
    pub n1: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,

    /// Baseline grid range step (m).
    #[serde(default = "default_r_step")]
    pub grid_r_step: f64,
    /// Baseline grid angle step (degrees).
    #[serde(default = "default_angle_step")]
    pub grid_angle_step_deg: f64,
    /// Half-width of the baseline search window in range (m), around the true user.
    #[serde(default = "default_window_r")]
    pub grid_window_r: f64,
    /// Half-width of the baseline search window in each angle (degrees).
    #[serde(default = "default_window_deg")]
    pub grid_window_deg: f64,
    #[serde(default = "default_budget")]
    pub omp_budget_bytes: u64,

    /// Antennas per side for `scaling`.
    #[serde(default)]
    pub sizes: Vec<usize>,
    /// Subarray side for each entry of `sizes`.
    #[serde(default)]
    pub sub_sizes: Vec<usize>,
    #[serde(default = "default_runs")]
    pub scaling_runs: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| wavelength_from_frequency(self.freq_hz))
    }

    pub fn geometry(&self) -> Result<ArrayGeometry, HarnessError> {
        let lambda = self.lambda();
        let d = self.spacing * lambda;
        Ok(ArrayGeometry::uniform_planar(self.n_x, self.n_y.unwrap_or(self.n_x), d, d, lambda)?)
    }

    pub fn plan(&self, geometry: &ArrayGeometry) -> Result<PartitionPlan, HarnessError> {
        Ok(PartitionPlan::new(geometry, self.m_x, self.m_y.unwrap_or(self.m_x))?)
    }

    /// Ranges in meters.
    pub fn ranges_m(&self, geometry: &ArrayGeometry, plan: &PartitionPlan) -> Vec<f64> {
        let unit = match self.range_unit {
            RangeUnit::M => 1.0,
            RangeUnit::Fraunhofer => geometry.field_boundaries().fraunhofer,
            RangeUnit::SubFraunhofer => plan.sub_fraunhofer,
        };
        self.ranges.iter().map(|r| r * unit).collect()
    }

    pub fn user_point(&self) -> Option<Vec3> {
        self.user.map(|[x, y, z]| Vec3::new(x, y, z))
    }

    pub fn aple_config(&self) -> aple_core::aple::ApleConfig {
        aple_core::aple::ApleConfig {
            n1: self.n1,
            damping: self.damping,
            ..Default::default()
        }
    }

    /// Checks everything a sweep needs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.snr_db.is_empty() {
            return bad("snr_db must list at least one value".into());
        }
        if self.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return bad("snr_db values must be numbers or inf".into());
        }
        if self.user.is_none() && self.ranges.is_empty() {
            return bad("set either user or ranges".into());
        }
        if self.ranges.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return bad("ranges must be positive".into());
        }
        if let Some(u) = self.user {
            if u[2].is_nan() || u[2] <= 0.0 {
                return bad("user must lie in front of the array (z > 0)".into());
            }
        }
        if !(0.0..=90.0).contains(&self.cone_deg) {
            return bad(format!("cone_deg {} outside [0, 90]", self.cone_deg));
        }
        if self.estimators.is_empty() {
            return bad("estimators must not be empty".into());
        }
        if !(self.grid_r_step > 0.0 && self.grid_angle_step_deg > 0.0) {
            return bad("grid steps must be positive".into());
        }
        if !(self.grid_window_r >= 0.0 && self.grid_window_deg >= 0.0) {
            return bad("grid windows must be non-negative".into());
        }
        self.aple_config().validate()?;
        let g = self.geometry()?;
        self.plan(&g)?;
        Ok(())
    }

    pub fn validate_scaling(&self) -> Result<(), HarnessError> {
        if self.sizes.is_empty() || self.sizes.len() != self.sub_sizes.len() {
            return Err(HarnessError::Config("sizes and sub_sizes must be non-empty and of equal length".into()));
        }
        for (&n, &s) in self.sizes.iter().zip(&self.sub_sizes) {
            if s == 0 || n % s != 0 {
                return Err(HarnessError::Config(format!("subarray side {s} does not divide {n}")));
            }
        }
        if self.ranges.len() > 1 {
            return Err(HarnessError::Config("scaling uses a single range".into()));
        }
        self.aple_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "n_x = 30\nm_x = 3\nranges = [2.0]\nsnr_db = [20.0]\n";

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.n_y, None);
        assert_eq!(c.spacing, 0.25);
        assert_eq!(c.estimators, vec![EstimatorKind::Aple]);
        assert_eq!(c.cone_deg, 30.0);
        assert!(c.validate().is_ok());
        assert!((c.lambda() - 3e8 / 28e9).abs() < 1e-15);
    }

    #[test]
    fn infinite_snr_parses() {
        let c = ExperimentConfig::from_toml("n_x = 30\nm_x = 3\nranges = [2.0]\nsnr_db = [inf, 10]\n").unwrap();
        assert_eq!(c.snr_db[0], f64::INFINITY);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("n_x = 30\nm_x = 3\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}trials = 0\n")).unwrap().validate().is_err());
        let c = ExperimentConfig::from_toml("n_x = 30\nm_x = 4\nranges = [2.0]\nsnr_db = [20.0]\n").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_toml("n_x = 30\nm_x = 3\nsnr_db = [20.0]\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn estimator_lists() {
        assert_eq!(
            EstimatorKind::parse_list("aple, OMP").unwrap(),
            vec![EstimatorKind::Aple, EstimatorKind::Omp]
        );
        assert!(EstimatorKind::parse_list("music").is_err());
    }

    #[test]
    fn range_units_scale() {
        let c = ExperimentConfig::from_toml(
            "n_x = 30\nm_x = 3\nranges = [1.0, 0.5]\nrange_unit = \"fraunhofer\"\nsnr_db = [20.0]\n",
        )
        .unwrap();
        let g = c.geometry().unwrap();
        let p = c.plan(&g).unwrap();
        let r = c.ranges_m(&g, &p);
        assert!((r[0] - 2.4107).abs() < 1e-3);
        assert!((r[1] - r[0] / 2.0).abs() < 1e-12);
    }
}
