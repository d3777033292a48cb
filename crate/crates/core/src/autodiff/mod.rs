//! Dense tensors, a recording tape with reverse-mode gradients, batch
//! normalization and the Adam updater.

mod adam;
mod batchnorm;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use batchnorm::{BatchNorm, Mode};
pub use tape::{Gradients, Norm, SatDims, Tape, Var};
pub use tensor::Tensor;
