//! Batch front end for `qdcsim`: experiment configs, single runs,
//! baseline comparisons and parameter sweeps.

pub mod commands;
pub mod config;

pub use commands::{cmd_compare, cmd_run, cmd_sweep, Axis, CompareRow, RunRow};
pub use config::{ExperimentConfig, Inputs};
