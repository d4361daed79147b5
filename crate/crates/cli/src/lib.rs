//! Pipelines behind the `bgflow` command: toy data, simulation, training,
//! synthesis, evaluation and ablation.

pub mod ablate;
pub mod config;
pub mod corpus;
pub mod data;
mod error;
pub mod evaluate;
pub mod manifest;
pub mod simulate;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
