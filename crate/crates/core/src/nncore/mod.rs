//! Dense tensor arithmetic with reverse-mode differentiation, optimizers,
//! and loss functions shared by all three pipelines.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, op_gradient_suite, GradCheckOptions, GradCheckResult};
pub use optim::{AdamConfig, OptimError, Optimizer, ParamStore};
pub use tape::{GradBuf, GradSet, NodeId, ParamId, Tape};
pub use tensor::{matmul, Tensor};
