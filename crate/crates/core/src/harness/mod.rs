//! Datasets, metrics, experiment orchestration and reporting.

pub mod ablation;
pub mod dataset;
pub mod experiment;
pub mod fixtures;
pub mod judge;
pub mod metrics;
pub mod synth;
