//! Dense tensors, numeric kernels and a reverse-mode differentiation graph.

mod finite_diff;
mod graph;
pub(crate) mod kernels;
mod real;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::{gelu, layer_norm, matmul, sigmoid, softmax};
pub use real::Real;
pub use tensor::Tensor;

/// Default layer-normalization epsilon.
pub const LN_EPS: f64 = 1e-6;


/// Denominator floor for gradient-check relative errors. Central differences
/// at h = 1e-5 on O(1) losses carry roughly 1e-10 of roundoff, which this
/// floor keeps below 1e-5 relative for gradients that are exactly zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;
