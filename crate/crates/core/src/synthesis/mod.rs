//! Synthetic anomalies for training the scale predictor.
//!
//! Noise masks select regions of a normal sample; the selected cells are
//! replaced by the aligned cells of a donor sample and then perturbed. Every
//! foreground cell of the resulting samples is encoded against the frozen
//! banks to form the training pool.

mod inject;
mod perlin;
mod pool;

pub use inject::{inject_anomaly, InjectionReference};
pub use perlin::{gen_perlin_mask, perlin_field, PerlinMask, PerlinParams};
pub use pool::{
    build_training_pool, encode_pool, labeled_cells, synthesize_samples, AugmentedSample, EncodedCell,
    LabeledFeaturePair, SynthesisConfig, TrainingPool,
};
