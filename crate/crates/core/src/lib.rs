//! Geometry-guided fusion of point-cloud and RGB feature maps for anomaly
//! detection.
//!
//! The pipeline: build coreset memory banks per modality, encode each test
//! feature by its nearest prototypes and offset directions, predict
//! direction-aware per-modality scales with a small network, and score cells
//! by a learned anisotropic metric. Training data comes from synthetic
//! anomalies injected into normal feature grids.

pub mod bank;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod losses;
pub mod lspn;
pub mod nn;
pub mod objective;
pub mod reference;
pub mod rng;
pub mod scoring;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
