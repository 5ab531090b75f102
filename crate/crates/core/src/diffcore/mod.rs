//! Differentiation engine: an eagerly-evaluated expression tape over small
//! dense buffers, generic over the scalar type so the same graph code runs on
//! plain `f64` (values, reverse-mode gradients) and on dual numbers
//! (forward-over-reverse Hessian-vector products and mixed partials).
//!
//! The backward pass emits ordinary tape nodes, so gradients are themselves
//! differentiable; unrolled second-order meta-gradients fall out of running
//! `backward` twice on one tape.

mod checkpoint;
mod func;
mod param;
mod scalar;
mod tape;

pub use checkpoint::CheckpointStore;
pub use func::{grad, grad_with_value, hvp, mixed_partial, read_param_grads, read_param_tangents, DiffFn1, DiffFn2};
pub use param::{ParamLayout, ParamVector, SegmentSpec};
pub use scalar::{Dual, Scalar};
pub use tape::{Adjoints, Buffer, NodeId, ParamNodes, Tape};

use thiserror::Error;

/// Errors surfaced by the differentiation layer.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("non-finite value in segment `{segment}` during {context}")]
    NumericFault { segment: String, context: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("step index {index} out of range (0..={max})")]
    StepOutOfRange { index: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, DiffError>;
