//! Desk-scale distillation of a promptable concept-segmentation teacher into
//! tiny students: a dense f64 tensor core with reverse-mode gradients, mask
//! losses with bipartite matching, prompt-in-the-loop encoder distillation,
//! latent cross-attention memory compression, a synthetic scene/clip
//! generator with a detect-propagate-merge tracker, and staged training
//! schedules, all deterministic per seed.
//!
//! The numeric core is generic over [`scalar::Scalar`] (f32/f64); the
//! pipeline uses the f64 aliases below.

pub mod autodiff;
pub mod cache;
pub mod checkpoint;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod stage3;
pub mod prompt;
pub mod runner;
pub mod sim;
pub mod stage1;
pub mod tracker;
pub mod matching;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

/// Default 64-bit tensor used throughout the pipeline.
pub type Tensor = tensor::Tensor<f64>;
/// 32-bit tensor, available for the generic core.
pub type Tensor32 = tensor::Tensor<f32>;
/// Default 64-bit computation record.
pub type Tape = autodiff::Tape<f64>;
