//! Uniform planar array layout, near/far-field distances, subarray partitioning
//! and the direction-cosine geometry that ties a location to per-subarray AoAs.
//!
//! The array lies in the z = 0 plane, centered at the origin. Antenna (i, j)
//! sits at `[i * d_x, j * d_y, 0]` with `i` running over the centered index set
//! `{-(N-1)/2, ..., (N-1)/2}`; for even `N` the indices are half-integers so the
//! array stays centered. Antennas are flattened row-major over (i, j), i.e. the
//! y index varies fastest.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Propagation speed used to turn a carrier frequency into a wavelength.
///
/// The rounded value reproduces the commonly tabulated 28 GHz distances
/// (e.g. 0.3857 m for a 6x6 half-wavelength subarray).
pub const PROPAGATION_SPEED: f64 = 3.0e8;

pub fn wavelength_from_frequency(freq_hz: f64) -> f64 {
    PROPAGATION_SPEED / freq_hz
}

/// Centered index set for `n` elements: `k - (n - 1) / 2` for `k = 0..n`.
pub fn centered_indices(n: usize) -> impl Iterator<Item = f64> + Clone {
    let half = (n as f64 - 1.0) / 2.0;
    (0..n).map(move |k| k as f64 - half)
}

/// `2 D^2 / lambda`.
pub fn fraunhofer_distance(aperture: f64, lambda: f64) -> f64 {
    2.0 * aperture * aperture / lambda
}

/// `0.62 sqrt(D^3 / lambda)`.
pub fn fresnel_distance(aperture: f64, lambda: f64) -> f64 {
    0.62 * (aperture.powi(3) / lambda).sqrt()
}

/// In-plane array axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::X, Axis::Y];

    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => Vec3::x(),
            Axis::Y => Vec3::y(),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub n_x: usize,
    pub n_y: usize,
    pub d_x: f64,
    pub d_y: f64,
    pub lambda: f64,
    pub positions: Vec<Vec3>,
}

impl ArrayGeometry {
    /// Builds an `n_x` x `n_y` uniform planar array centered at the origin.
    ///
    /// Even counts are accepted; their index sets are shifted by one half so the
    /// array remains centered.
    pub fn uniform_planar(n_x: usize, n_y: usize, d_x: f64, d_y: f64, lambda: f64) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::InvalidGeometry(format!(
                "antenna counts must be positive, got {n_x}x{n_y}"
            )));
        }
        for (name, v) in [("d_x", d_x), ("d_y", d_y), ("lambda", lambda)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidGeometry(format!("{name} must be positive, got {v}")));
            }
        }
        let mut positions = Vec::with_capacity(n_x * n_y);
        for i in centered_indices(n_x) {
            for j in centered_indices(n_y) {
                positions.push(Vec3::new(i * d_x, j * d_y, 0.0));
            }
        }
        Ok(Self {
            n_x,
            n_y,
            d_x,
            d_y,
            lambda,
            positions,
        })
    }

    pub fn num_antennas(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Flat index of the antenna at zero-based grid coordinates (`ix`, `iy`).
    pub fn flat_index(&self, ix: usize, iy: usize) -> usize {
        ix * self.n_y + iy
    }

    pub fn field_boundaries(&self) -> FieldBoundaries {
        let l_x = self.n_x as f64 * self.d_x;
        let l_y = self.n_y as f64 * self.d_y;
        let aperture = l_x.hypot(l_y);
        FieldBoundaries {
            fresnel: fresnel_distance(aperture, self.lambda),
            fraunhofer: fraunhofer_distance(aperture, self.lambda),
            aperture,
        }
    }
}

/// Fresnel distance `R_N`, Fraunhofer distance `R_F` and largest dimension `D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldBoundaries {
    pub fresnel: f64,
    pub fraunhofer: f64,
    pub aperture: f64,
}

/// Shape of one subarray, which is all an AoA estimator needs to know.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubarrayShape {
    pub n_x: usize,
    pub n_y: usize,
    pub d_x: f64,
    pub d_y: f64,
    pub lambda: f64,
}

impl SubarrayShape {
    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Split of the array into `m_x * m_y` equal, contiguous, non-overlapping blocks.
///
/// Subarrays are numbered row-major over the block grid; within a subarray the
/// antennas of `index_map[m]` are listed row-major over local (p, q), which is
/// the order the steering vector uses.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub m_x: usize,
    pub m_y: usize,
    pub sub_nx: usize,
    pub sub_ny: usize,
    pub centers: Vec<Vec3>,
    pub index_map: Vec<Vec<usize>>,
    pub sub_fraunhofer: f64,
}

impl PartitionPlan {
    pub fn new(geometry: &ArrayGeometry, m_x: usize, m_y: usize) -> Result<Self> {
        for (axis, count, blocks) in [('x', geometry.n_x, m_x), ('y', geometry.n_y, m_y)] {
            if blocks == 0 || count % blocks != 0 {
                return Err(Error::NonDivisiblePartition {
                    axis,
                    count,
                    blocks,
                });
            }
        }
        let sub_nx = geometry.n_x / m_x;
        let sub_ny = geometry.n_y / m_y;
        let mut centers = Vec::with_capacity(m_x * m_y);
        let mut index_map = Vec::with_capacity(m_x * m_y);
        for bx in 0..m_x {
            for by in 0..m_y {
                let mut members = Vec::with_capacity(sub_nx * sub_ny);
                for p in 0..sub_nx {
                    for q in 0..sub_ny {
                        members.push(geometry.flat_index(bx * sub_nx + p, by * sub_ny + q));
                    }
                }
                let center = members
                    .iter()
                    .fold(Vec3::zeros(), |acc, &k| acc + geometry.positions[k])
                    / members.len() as f64;
                centers.push(center);
                index_map.push(members);
            }
        }
        let sub_aperture = (sub_nx as f64 * geometry.d_x).hypot(sub_ny as f64 * geometry.d_y);
        Ok(Self {
            m_x,
            m_y,
            sub_nx,
            sub_ny,
            centers,
            index_map,
            sub_fraunhofer: fraunhofer_distance(sub_aperture, geometry.lambda),
        })
    }

    pub fn m_count(&self) -> usize {
        self.centers.len()
    }

    pub fn subarray_shape(&self, geometry: &ArrayGeometry) -> SubarrayShape {
        SubarrayShape {
            n_x: self.sub_nx,
            n_y: self.sub_ny,
            d_x: geometry.d_x,
            d_y: geometry.d_y,
            lambda: geometry.lambda,
        }
    }

    /// Checks that `p_u` lies beyond the Fraunhofer distance of every subarray.
    pub fn validate_far_field(&self, p_u: &Vec3) -> FarFieldReport {
        let entries: Vec<FarFieldEntry> = self
            .centers
            .iter()
            .map(|c| {
                let distance = (c - p_u).norm();
                FarFieldEntry {
                    distance,
                    fraunhofer: self.sub_fraunhofer,
                    passes: self.sub_fraunhofer < distance,
                }
            })
            .collect();
        let all_pass = entries.iter().all(|e| e.passes);
        FarFieldReport { entries, all_pass }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarFieldEntry {
    pub distance: f64,
    pub fraunhofer: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarFieldReport {
    pub entries: Vec<FarFieldEntry>,
    pub all_pass: bool,
}

impl FarFieldReport {
    pub fn shortest_distance(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.distance)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Direction cosines of the user as seen from a subarray center.
///
/// `theta_x = cos(azimuth) sin(elevation)`, `theta_y = sin(azimuth) sin(elevation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoaPair {
    pub theta_x: f64,
    pub theta_y: f64,
}

impl AoaPair {
    pub fn new(theta_x: f64, theta_y: f64) -> Self {
        Self { theta_x, theta_y }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.theta_x,
            Axis::Y => self.theta_y,
        }
    }

    pub fn azimuth(&self) -> f64 {
        self.theta_y.atan2(self.theta_x)
    }

    /// Elevation from boresight, assuming the source is in front of the array.
    pub fn elevation(&self) -> f64 {
        self.theta_x.hypot(self.theta_y).min(1.0).asin()
    }
}

/// Unit vector from `center` to `p_u` projected on the array axes.
///
/// The direction points from the subarray towards the user so that a positive
/// `theta_x` produces the positive phase slope of the far-field steering vector.
pub fn subarray_aoa(center: &Vec3, p_u: &Vec3) -> Result<AoaPair> {
    let w = p_u - center;
    let r = w.norm();
    if r == 0.0 {
        return Err(Error::ZeroDistance([center.x, center.y, center.z]));
    }
    Ok(AoaPair::new(w.x / r, w.y / r))
}

/// Cartesian point from range, azimuth and elevation about the origin.
pub fn spherical_to_cartesian(r: f64, azimuth: f64, elevation: f64) -> Vec3 {
    let (sw, cw) = azimuth.sin_cos();
    let (sp, cp) = elevation.sin_cos();
    Vec3::new(r * cw * sp, r * sw * sp, r * cp)
}

/// Inverse of [`spherical_to_cartesian`]: `(r, azimuth, elevation)`.
pub fn cartesian_to_spherical(p: &Vec3) -> (f64, f64, f64) {
    let r = p.norm();
    if r == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let azimuth = p.y.atan2(p.x);
    let elevation = (p.z / r).clamp(-1.0, 1.0).acos();
    (r, azimuth, elevation)
}
