//! One-stage temporal action detection on pre-extracted clip-feature
//! sequences: a transformer neck over a feature pyramid, dense anchor-free
//! verb/noun/boundary heads, focal + IoU training losses, Soft-NMS decoding,
//! and temporal-IoU mAP evaluation.
//!
//! Everything runs on CPU and is deterministic for a fixed seed.

pub mod autodiff;
pub(crate) mod binio;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{broadcast_shapes, Scalar, Tensor};
