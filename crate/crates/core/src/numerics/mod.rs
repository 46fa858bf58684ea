//! Tensor math and differentiation.
//!
//! Layout conventions used throughout the crate: row-major storage, batch
//! axes leftmost, the feature axis always rightmost. `f64` is the default
//! element type; `f32` is available for smaller files and faster training.

pub mod check;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Variance floor added inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
