use thiserror::Error;

/// Errors raised by array construction, channel synthesis and the estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("{axis}-axis: {count} antennas cannot be split into {blocks} equal subarrays")]
    NonDivisiblePartition {
        axis: char,
        count: usize,
        blocks: usize,
    },

    #[error("point coincides with reference position {0:?}")]
    ZeroDistance([f64; 3]),

    #[error("direction cosine out of range: ({0}, {1})")]
    DirectionOutOfRange(f64, f64),

    #[error("curvature must be positive, got {0}")]
    NonPositiveCurvature(f64),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error(
        "dictionary needs {required} bytes ({atoms} atoms x {antennas} antennas), budget is {budget} bytes"
    )]
    BudgetExceeded {
        required: u64,
        budget: u64,
        atoms: usize,
        antennas: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
