//! Cross-domain ensemble distillation (XDED) and UniStyle feature
//! standardization for domain generalization, trained on CPU with a small
//! reverse-mode autodiff engine, plus the diagnostics used to study them.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod regularizers;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
