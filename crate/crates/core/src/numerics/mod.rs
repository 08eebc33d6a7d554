//! Dense tensors, a reverse-mode tape, and AdamW.
//!
//! Everything above this module (encoders, heads, training) is expressed as
//! primitive applications recorded on a [`Tape`]. Reductions run in a fixed
//! left-to-right order so reruns are bit-identical, and any NaN or infinity
//! produced by a primitive is reported as [`NumericsError::NonFinite`].

mod float;
mod gemm;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use float::{DType, Float};
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamEntry, ParamSet};
pub use tape::{Tape, TapeStats, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("index {index} out of range in {op} (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Natural-log softmax of one logit row, evaluated at 64-bit.
pub fn log_softmax<T: Float>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
    let sum = logits.iter().fold(0.0, |s, &v| s + (v.as_f64() - max).exp());
    let lse = max + sum.ln();
    logits.iter().map(|&v| v.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests;
