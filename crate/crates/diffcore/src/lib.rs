//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records the operations of
//! one forward pass and replays them backwards. Parameters live in a
//! [`ParamStore`] and are bound onto a tape per pass.

mod error;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{
    grad_check, relative_error, GradCheckOptions, GradCheckReport, REL_ERROR_FLOOR,
};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
