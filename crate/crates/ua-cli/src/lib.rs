//! Experiment harness for the uniformly accurate integrators: configuration
//! parsing, sweep/monitoring drivers and CSV/plot persistence. The binary in
//! `main.rs` is a thin wrapper over [`runner`].

pub mod config;
pub mod csvout;
pub mod runner;
