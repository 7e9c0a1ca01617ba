//! Experiment harness for `moue-core`: configuration, a synthetic corpus,
//! checkpoint files and the CSV reports behind the `moue` CLI.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::HarnessError;
