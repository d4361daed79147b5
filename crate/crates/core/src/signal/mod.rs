//! Waveform and log-mel substrate.
//!
//! Everything downstream (augmentation, masking, the acoustic model, metrics)
//! consumes the types defined here: [`Waveform`] for audio in the time domain
//! and [`MelSpectrogram`] for natural-log mel energies laid out frame-major.

mod melfile;
mod mel;
mod resample;
mod vocoder;
pub mod wav;

pub use mel::{MelConfig, MelExtractor};
pub use melfile::{decode_mel, encode_mel, mel_read, mel_write, MEL_MAGIC};
pub use resample::resample;
pub use vocoder::griffin_lim_vocode;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sample rate every pipeline stage works at after ingestion.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square over the full length.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Frame-major (T×B) log-mel energies in natural-log units.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f32>,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        if frames.ncols() == 0 {
            return Err(Error::InvalidArgument("mel must have at least one bin".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mel contains non-finite entries".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f32> {
        self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Frames `start..end` as a new spectrogram.
    pub fn slice_frames(&self, start: usize, end: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: self.frames.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }
}
