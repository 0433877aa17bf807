//! Minimal reverse-mode tensor engine: the layers the model needs, AdamW, and a
//! finite-difference gradient checker.

mod conv;
pub mod gradcheck;
mod norm;
mod ops;
pub mod optim;
mod real;
mod tape;
mod tensor;

pub use conv::{Conv1dOpts, Conv2dOpts};
pub use gradcheck::{gradcheck, relative_error, GradcheckOpts, GradcheckReport, GRAD_FLOOR_REL};
pub use ops::gelu_scalar;
pub use optim::{zero_grads, AdamWConfig, OptimizerState};
pub use real::Real;
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
pub use tensor::{numel, Parameter, Tensor};
