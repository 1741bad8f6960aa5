//! Dense f64 tensors, a reverse-mode tape, finite-difference checking and optimizers.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, Optimizer, OptimizerConfig, Sgd};
pub use params::{ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
