//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Values live on a [`Tape`] and are addressed through [`Var`] handles. Model
//! parameters are registered as leaves at the start of each forward pass, so a
//! tape only ever describes one evaluation and is dropped afterwards.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{BatchNormMode, RunningStats, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
