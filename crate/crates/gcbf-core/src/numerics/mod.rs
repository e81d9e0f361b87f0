//! Deterministic tensor arithmetic, reverse-mode autodiff, Adam, and seeded
//! random number generation. Everything is 64-bit floats on the CPU.

mod adam;
mod gradcheck;
mod program;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{gradient_check, DiffFn, GradCheckReport};
pub use program::{evaluate_and_backprop, Program, Step};
pub use rng::RngState;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from the numerics engine.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown primitive `{name}`")]
    UnknownPrimitive { name: String },
}
