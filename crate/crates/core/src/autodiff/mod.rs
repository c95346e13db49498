//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op of one forward pass; [`Tape::backward`] walks
//! it once in reverse. Only the ops the classifier and its losses need are
//! provided: convolutions are fixed at 3×3 / stride 1 / padding 1 and pooling
//! at 2×2 mean.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
