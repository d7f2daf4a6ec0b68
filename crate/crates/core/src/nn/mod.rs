//! Dense linear algebra and the handful of network pieces the scale predictor
//! is built from: affine layers, ReLU, `exp(tanh(.))`, inverted dropout, Adam
//! and a finite-difference gradient checker.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32`
//! (production) and `f64` (gradient-check shadow mode).

mod adam;
mod gradcheck;
mod layers;
mod matrix;
mod real;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{backprop_check, central_difference, max_relative_error, scaled_relative_error, GradCheck};
pub(crate) use layers::BlockCache;
pub use layers::{
    dropout_forward, exp_tanh, exp_tanh_backward, linear_forward, relu, relu_backward, Linear, LinearBlock, LinearGrad,
};
pub use matrix::DenseMatrix;
pub use real::Real;
