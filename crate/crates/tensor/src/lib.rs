//! Minimal dense-tensor engine used by the recommender.
//!
//! Values live in [`Tensor`] (row-major `f64`). Differentiable computations
//! are recorded on a [`Tape`] and replayed backwards by [`Tape::backward`].
//! [`Adam`] applies adaptive-moment updates to the trainable subset of a
//! parameter list.

mod error;
mod gemm;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use error::TensorError;
pub use optim::{Adam, AdamConfig, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
