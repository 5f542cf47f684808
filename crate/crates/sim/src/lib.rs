//! File formats, experiment runner and thread-pool executor around
//! `fedaudio-core`.

pub mod checkpoint;
pub mod config;
pub mod exec;
pub mod feature_file;
pub mod manifest;
pub mod report;
pub mod runner;
pub mod wav;

pub use config::{ConfigError, ExperimentConfig};
pub use exec::PoolExecutor;
pub use runner::{run_experiment, ExperimentOutput, RunError};
