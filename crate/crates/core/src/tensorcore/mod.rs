//! Dense `f32` tensors and a small reverse-mode autodiff tape.

mod graph;
pub(crate) mod kernels;
pub mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{l2_normalize_rows, matmul, rmsnorm, softmax_lastdim};
pub use tensor::Tensor;
