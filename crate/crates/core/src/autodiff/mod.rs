//! Minimal reverse-mode differentiable tensor core.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::{flat_index, Tensor};
