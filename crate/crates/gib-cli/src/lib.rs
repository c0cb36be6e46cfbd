//! Experiment driver library behind the `gib` binary: spec parsing, sweep
//! and ablation execution, metrics persistence, and figure generation.

pub mod figure;
pub mod runner;
pub mod spec;
pub mod tables;
