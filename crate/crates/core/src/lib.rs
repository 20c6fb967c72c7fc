//! Desk-scale sparse-query cascade detector with IoU-weighted attention and
//! per-branch channel gating, on a from-scratch reverse-mode autodiff core.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64` as the working precision used by the
//! CLI, the training harness, and the acceptance tolerances.

pub mod attention;
pub mod dynamic_head;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod matcher;
pub mod oracles;
pub mod pipeline;
pub mod rng;
pub mod roi_align;
pub mod scalar;
pub mod selfcheck;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// Working-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Working-precision named trainable leaf.
pub type Parameter = tensor::Parameter<f64>;
/// Working-precision box.
pub type BBox = geometry::BBox<f64>;
/// Working-precision box set.
pub type BoxSet = geometry::BoxSet<f64>;
