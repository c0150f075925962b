//! Dense matrices, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{sigmoid, Gradients, Graph, NodeId, Op, LOG_CLAMP};
pub use tensor::Tensor;
