//! Minimal differentiable-computation core.
//!
//! Everything both networks are built from: a dense tensor type generic over
//! the scalar (f32 for training speed, f64 so tests can hold oracles to tight
//! tolerances), pure-math kernels, a reverse-mode tape, layer definitions,
//! Adam, spectral normalization, and an exact-round-trip checkpoint container.

pub mod adam;
pub mod checkpoint;
#[cfg(test)]
mod gradcheck;
pub mod layers;
pub mod ops;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, ParameterSet};
pub use spectral::SpectralState;
pub use tape::{Graph, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
}
