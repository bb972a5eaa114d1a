//! Reverse-mode differentiation over dense `f64` tensors, plus AdamW.

mod adamw;
pub(crate) mod graph;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};
