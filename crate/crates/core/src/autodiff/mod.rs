//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Tensors are row-major `Vec`s with a shape. Every op that touches a
//! gradient-requiring input records an [`Op`] node; [`Tensor::backward`]
//! walks the resulting acyclic graph once in reverse topological order and
//! accumulates `d(root)/d(tensor)` into each participating tensor. The graph
//! is built eagerly per forward pass and freed when the tensors drop.

mod backward;
mod conv;
mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::{gradient_check, standard_suite, CoordCheck, GradCheckReport, SuiteCase};
pub use tensor::{grad_enabled, no_grad, NoGradGuard, Tensor};
