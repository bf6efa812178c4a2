pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dac;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod objectives;
pub mod preprocess;
pub mod synth;

pub use error::{Error, Result};
