//! Action recognition, anticipation, and VQA toolkit.
//!
//! The crate is organized around three pipelines that share a small
//! tape-based autodiff core:
//!
//! - video-to-image stitching feeding a convolutional encoder with
//!   attention-contrastive distillation against a frozen teacher,
//! - factored verb/noun label spaces with a dictionary-guided unified
//!   action head,
//! - an object-feature/question co-attention answer classifier with
//!   pooled cross-attention fusion.
//!
//! All numeric kernels are generic over [`scalar::Scalar`] (f32 or f64);
//! concrete aliases live at the crate root.

pub mod checkpoint;
pub mod config;
pub mod dictionary;
pub mod error;
pub mod harness;
pub mod heads;
pub mod mcan;
pub mod metrics;
pub mod moma;
pub mod nn;
pub mod plot;
pub mod scalar;
pub mod seeding;
pub mod stitch;
pub mod synth;
pub mod tape;
pub mod text;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f32 tape, the training default.
pub type Tape32 = tape::Tape<f32>;
/// f64 tape, used by the finite-difference oracles.
pub type Tape64 = tape::Tape<f64>;
