//! Differentiable soft-logic constraint engine and toy-scale segmentation
//! trainer.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autodiff`]), a fuzzy real-logic layer that grounds formulas into truth
//! values in `[0, 1]` ([`logic`]), the four domain groundings and their hard
//! evaluation counterparts ([`constraints`]), a fixed-topology encoder-decoder
//! segmentation network ([`model`]), a synthetic two-lobe phantom generator
//! with dataset persistence ([`data`]), the training loop ([`train`]), hard
//! metrics and report emission ([`eval`]), and a reproducible multi-seed
//! experiment harness ([`experiment`]).
//!
//! All numeric kernels are generic over the scalar type via [`scalar::Real`];
//! the pipeline (datasets, checkpoints, training) is pinned to `f64`, for
//! which the crate root exports concrete aliases.

pub mod autodiff;
pub mod constraints;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
mod io;
pub mod logic;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default-precision tensor used by the training pipeline.
pub type Tensor64 = autodiff::Tensor<f64>;
/// Single-precision tensor alias.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Default-precision truth value.
pub type TruthValue64 = logic::TruthValue<f64>;
/// Default-precision knowledge base.
pub type KnowledgeBase64 = logic::KnowledgeBase<f64>;
/// Default-precision class-probability grid.
pub type ClassProbs64 = constraints::ClassProbs<f64>;
/// Default-precision segmentation model.
pub type SegModel64 = model::SegModel<f64>;
