//! Scalar mean/std normalization of log-mel features.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: f32,
    pub std: f32,
}

impl MelNorm {
    /// Corpus-wide statistics over every bin of every frame.
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for m in mels {
            for &v in m.iter() {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no mel frames to fit normalization".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        if var.sqrt() < 1e-6 {
            return Err(Error::InvalidArgument("mel features have zero variance".into()));
        }
        Ok(Self {
            mean: mean as f32,
            std: var.sqrt() as f32,
        })
    }

    pub fn normalize(&self, mel: &Array2<f32>) -> Array2<f32> {
        mel.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, mel: &Array2<f32>) -> Array2<f32> {
        mel.mapv(|v| v * self.std + self.mean)
    }
}
