//! Dense tensors with reverse-mode differentiation.

mod dist;
mod gradcheck;
mod graph;
mod tensor;

pub use dist::{gaussian_nll, kl_diag_gaussian, DiagGaussian};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
