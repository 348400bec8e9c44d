//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Graph`] records one forward pass as a tape of ops; [`Graph::backward`]
//! walks it in reverse. Everything runs on the calling thread, so results
//! are bit-reproducible for identical inputs.

mod graph;
mod kernels;
mod optim;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Logistic function, stable for large magnitudes.
pub fn sigmoid<T: Real>(x: T) -> T {
    graph::sigmoid(x)
}
