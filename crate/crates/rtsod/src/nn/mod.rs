//! A small reverse-mode autodiff engine over `f64` tensors.
//!
//! The network rebuilds a fresh [`Graph`] per forward pass (define-by-run).
//! Every op evaluates eagerly and records a backward closure; gradients are
//! produced by a single reverse sweep. All evaluation is sequential and
//! allocation order is fixed by construction order, which keeps repeated runs
//! bitwise identical.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sample;

pub use graph::{Arr, Gradients, Graph, Var};
pub use optim::AdamW;
pub use params::ParamStore;

use ndarray::IxDyn;

/// Convenience constructor for a dynamic-shape tensor.
pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

/// Tensor from a flat vec with the given shape.
pub fn tensor(shape: &[usize], data: Vec<f64>) -> Arr {
    Arr::from_shape_vec(IxDyn(shape), data).expect("tensor shape/data mismatch")
}
