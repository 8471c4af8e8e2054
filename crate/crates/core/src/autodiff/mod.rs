//! Reverse-mode differentiation, optimizers and gradient checking.

pub mod checkpoint;
mod gradcheck;
mod optim;
mod param;
mod suite;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerKind};
pub use param::{ParamId, ParamStore, Parameter};
pub use suite::{gradient_suite, GradCase};
pub use tape::{Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::{log_sigmoid, sigmoid};
