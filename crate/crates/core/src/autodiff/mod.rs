//! Minimal reverse-mode automatic differentiation.

pub mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use params::{adam_step, zero_grads, AdamConfig, AdamState, ParamId, ParamStore, Parameter};
pub use rng::{PassKey, RngStream};
pub use tape::{forward, Mode, Tape, Var};
pub use tensor::Tensor;
