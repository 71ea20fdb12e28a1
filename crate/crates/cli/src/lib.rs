//! Batch experiment runner for `rmtcorr`: seeded Monte Carlo replications
//! driven by JSON configs, with CSV and JSON reports.

pub mod config;
pub mod experiments;
pub mod law;
pub mod report;

pub use config::ExperimentConfig;
