//! Experiment runner and command-line front end for near-field localization
//! studies built on `aple-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;

pub use error::HarnessError;
