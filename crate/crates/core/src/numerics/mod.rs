//! Dense matrix kernels, losses and reverse-mode differentiation.

mod graph;
pub mod linalg;
pub mod loss;
mod matrix;
pub mod ops;

pub use graph::{grad_check, Gradients, Graph, Var};
pub use loss::{loss, loss_grad, row_losses, LossKind, Target};
pub use matrix::Mat;
pub use ops::{elementwise, matmul, Pointwise};
