//! Configuration, experiment orchestration and aggregation on top of
//! `allo-core`.

pub mod aggregate;
pub mod config;
pub mod error;
pub mod experiments;
pub mod verify;

pub use aggregate::{aggregate, welch_t_test, Comparison, Stats, WelchTest};
pub use config::{ExperimentId, ExperimentSpec, Sweep};
pub use error::HarnessError;
pub use experiments::{run_experiment, run_experiment_with, AggregateReport, RunCache, RunOptions};
