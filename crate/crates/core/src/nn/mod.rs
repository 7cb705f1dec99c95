//! Tensor, reverse-mode autodiff, parameter storage and optimisation.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{compare_with_differences, grad_check};
pub use graph::{bce_value, sigmoid, softplus, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{uniform_init, ParamStore};
pub use tensor::Tensor;
