//! Dense tensors and reverse-mode differentiation.

mod dense;
mod gradcheck;
mod graph;

pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use graph::{bce_with_logits_scalar, sigmoid_scalar, Graph, Var};
