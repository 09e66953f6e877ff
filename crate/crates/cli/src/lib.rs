//! Experiment runners behind the `seqfb` binary.

pub mod config;
pub mod experiment;
pub mod validation;

pub use config::{ExperimentConfig, PolicyKind};
pub use experiment::{run_experiment, write_csv, ExperimentRow};
pub use validation::{run_validation, ValidationRow};
