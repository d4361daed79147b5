//! Numerical core for background-controllable zero-shot TTS: audio and
//! log-mel substrate, acoustic-condition simulation, masking, flow-matching
//! math, the text front-end and objective metrics.

pub mod augment;
pub mod error;
pub mod evaluate;
pub mod flowmatch;
pub mod linalg;
pub mod masking;
pub mod seed;
pub mod signal;
pub mod textfront;
pub mod toyspeech;

pub use error::{Error, Result};
