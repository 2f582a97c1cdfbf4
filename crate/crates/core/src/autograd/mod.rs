//! Reverse-mode differentiation, parameter storage, optimization and checkpoints.

pub mod checkpoint;
mod gradcheck;
mod params;
mod sgd;
mod tape;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use sgd::{Sgd, SgdConfig, StepDecay};
pub use tape::{Gradients, Tape, Var};
