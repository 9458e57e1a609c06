//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::check_gradient;
pub use graph::{sigmoid, Graph, NodeId, Tensors, L1_DEGENERATE};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
