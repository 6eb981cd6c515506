//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Tensors are row-major flat `Vec<f64>` buffers (1-D or 2-D; scalars are
//! `[1]`). All recorded operations live on a [`Tape`]; calling
//! [`Tape::backward`] walks the tape in reverse and returns a gradient map
//! for every `requires_grad` leaf. No views, no striding, no broadcasting
//! beyond row-bias addition — copies are fine at this scale.
//!
//! Every op validates shapes on entry and checks its output for NaN/Inf, so
//! numerical corruption surfaces at the op that produced it instead of three
//! layers downstream.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use optim::{adam_step, OptimState};
pub use params::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore, TapeCtx, CHECKPOINT_FORMAT,
};
pub use tape::{Tape, Tensor, TensorError, TensorId};

pub type Result<T> = std::result::Result<T, TensorError>;
