//! Experiment driver: config parsing, preset runs and convergence studies.

pub mod config;
pub mod experiment;
pub mod studies;
