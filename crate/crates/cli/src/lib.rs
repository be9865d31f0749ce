//! Experiment runner around the core library: reproducible configs with
//! content hashes, dataset generation, training with loss logs and
//! checkpoints, metric evaluation, and sweep orchestration.

pub mod config;
pub mod runner;
pub mod sweep;
