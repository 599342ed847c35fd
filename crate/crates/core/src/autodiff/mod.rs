//! Minimal dense-tensor engine with reverse-mode differentiation.

mod check;
mod graph;
mod tensor;

pub use check::{analytic_gradient, eval_scalar, grad_check, numeric_gradient};
pub use graph::{log_sum_exp, DiffTensor, Graph, NodeId};
pub use tensor::Tensor;
