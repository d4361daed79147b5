//! Neural models for background-controllable flow-matching TTS: the
//! transformer vector-field estimator with gated speaker encoders, the
//! duration predictor, their training loops and checkpoints.

pub mod acoustic;
pub mod adam;
pub mod checkpoint;
pub mod duration;
mod error;
pub mod gradcheck;
pub mod infer;
pub mod nn;
pub mod norm;
pub mod toyflow;
pub mod train;

pub use error::{Error, Result};
