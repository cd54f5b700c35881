//! Experiment configuration, orchestration and reporting behind the CLI.

pub mod commands;
pub mod config;
pub mod curves;
pub mod eval;
pub mod run;
