//! Dense containers, seeded randomness and the symmetric eigensolver.

mod eig;
mod matrix;
mod rng;
mod tensor;

pub use eig::{sym_eig, SymEig};
pub use matrix::Matrix;
pub use rng::RngStream;
pub use tensor::Tensor3;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("empty range [{lo}, {hi})")]
    EmptyRange { lo: f64, hi: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
