//! Command-line front end of the g2sf pipeline.
//!
//! A run lives in one directory with a slot per stage (`dataset/`, `banks/`,
//! `pool/`, `checkpoints/`, `scores/`, `reports/`). Stages verify the hash
//! chain of their upstream manifests before reading anything.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod selftest;

pub use cli::run_from;
pub use error::{CliError, CliResult};
