//! Masked discrete diffusion policies over tokenized action chunks.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
