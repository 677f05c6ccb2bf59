//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).

mod graph;
mod param;

pub use graph::{conv_output_size, Binary, Graph, NodeId, Unary};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
