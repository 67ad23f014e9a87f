//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Parameters live in a
//! [`ParamStore`] and are bound onto a fresh graph for each forward pass;
//! [`Graph::backward`] then returns gradients for every differentiable leaf.
//! Spatial tensors use channel-last layout (`s×s×d`, batched `n×s×s×d`).

mod check;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use params::{
    accumulate_grads, clip_grad_norm, scale_grads, Adam, Bound, NamedGrads, Optimizer,
    ParamStore, SgdMomentum, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
