//! Near-field localization with a partitioned planar array: per-subarray AoA
//! estimation, von Mises message passing between subarrays and the user
//! location, and grid-based reference estimators.

pub mod aoa;
pub mod aple;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod vonmises;

pub use error::{Error, Result};
pub use geometry::Vec3;
