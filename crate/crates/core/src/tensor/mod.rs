// SPDX-License-Identifier: Apache-2.0

//! Dense `f64` tensors with a reverse-mode tape.

mod array;
pub mod checkpoint;
mod params;
mod tape;

pub use array::Tensor;
pub use params::{BoundParams, ParamStore};
pub use tape::{std_normal_cdf, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable is not on this tape")]
    NotOnTape,
}

#[cfg(test)]
mod tests;
