//! Dense tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
pub mod init;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, GraphStats, Mode, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
