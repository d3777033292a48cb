//! Spiking neural networks trained with backpropagation through time, and
//! spike-level knowledge distillation from a large teacher into a small
//! student.
//!
//! Layers are `linear -> batch norm -> spiking unit`; the network output is a
//! spike accumulation tensor (SAT) of shape `[timesteps, classes, batch]`.
//! Students learn to match a frozen teacher's SAT through a weighted mix of a
//! sliding-window distance, a whole-sequence distance and a per-step KL term.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod preset;
pub mod snn;
pub mod store;

pub use error::{Error, Result};
