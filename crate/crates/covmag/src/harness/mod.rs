//! Configuration-driven experiment runner.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, SweepAxis, SCHEMA_VERSION};
pub use runner::{
    init_threads, predict, reconstruct_report, resolve, run, run_point, run_sweep,
    write_reconstruct_csv, CorrelationReport, ReconstructRow, ResolvedPoint, SweepPoint,
    SweepResult,
};
