//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_scaled, GradCheck};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{lr_schedule, optimizer_step, AdamWConfig, Bound, Param, ParamId, ParamStore};
pub use tensor::Tensor;

