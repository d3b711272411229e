//! Dense matrices, reverse-mode gradients, AdamW and finite-difference checks.

mod gradcheck;
mod matrix;
mod optim;
mod params;
mod tape;

pub use gradcheck::{gradient_check, gradient_check_against, relative_error, GradCheckFailure, GradCheckReport};
pub use matrix::{Axis, Matrix};
pub use optim::{adamw_update, global_norm, linear_decay_lr, AdamWConfig, AdamWState, ParameterGroup};
pub use params::{ParamEntry, ParamGroupKind, ParamId, ParamStore};
pub use tape::{leaky_relu, masked_row_softmax, Gradients, Tape, Var};
