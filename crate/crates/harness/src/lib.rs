//! Experiment harness for the bilevel optimizers: JSON-configured runs,
//! hypergradient checks and the acceptance report.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
