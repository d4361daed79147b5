//! Frame masks and the masked target / visible context split.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value written into masked frames of the context. Mels are mean-normalized
/// before masking, so 0 sits at the corpus mean.
pub const CONTEXT_FILL: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Contiguous,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    masked: Vec<bool>,
    kind: MaskKind,
}

impl MaskSpec {
    pub fn full(len: usize) -> Self {
        Self {
            masked: vec![true; len],
            kind: MaskKind::Full,
        }
    }

    /// Mask frames `range` out of `len`.
    pub fn contiguous(len: usize, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > len {
            return Err(Error::InvalidArgument(format!(
                "mask range {range:?} does not fit in {len} frames"
            )));
        }
        if range.start == 0 && range.end == len {
            return Ok(Self::full(len));
        }
        let masked = (0..len).map(|i| range.contains(&i)).collect();
        Ok(Self {
            masked,
            kind: MaskKind::Contiguous,
        })
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, frame: usize) -> bool {
        self.masked[frame]
    }

    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    /// Span of masked frames, if any.
    pub fn masked_range(&self) -> Option<Range<usize>> {
        let start = self.masked.iter().position(|m| *m)?;
        let end = self.masked.iter().rposition(|m| *m)? + 1;
        Some(start..end)
    }

    /// Per-frame 1.0 (masked) / 0.0 (visible).
    pub fn weights(&self) -> Vec<f32> {
        self.masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Masked-fraction bounds used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { f_min: 0.7, f_max: 1.0 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_min <= self.f_max && self.f_max <= 1.0) {
            return Err(Error::Config(format!(
                "mask fractions must satisfy 0 < f_min <= f_max <= 1, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<MaskSpec> {
        sample_mask(len, self.f_min, self.f_max, rng)
    }
}

/// Draw a contiguous mask covering between `ceil(f_min·T)` and
/// `floor(f_max·T)` frames (at least one), uniformly placed.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, f_min: f64, f_max: f64, rng: &mut R) -> Result<MaskSpec> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot mask a zero-length sequence".into()));
    }
    if !(f_min > 0.0 && f_min <= f_max && f_max <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask fractions must satisfy 0 < f_min <= f_max <= 1, got [{f_min}, {f_max}]"
        )));
    }
    let lo = ((f_min * len as f64).ceil() as usize).clamp(1, len);
    let hi = ((f_max * len as f64).floor() as usize).clamp(lo, len);
    let masked_len = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=len - masked_len);
    MaskSpec::contiguous(len, start..start + masked_len)
}

/// `x̃`, `x̃^aug` and the visible context `x_ctx^aug` for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTriple {
    pub target_clean: Array2<f32>,
    pub target_aug: Array2<f32>,
    pub context: Array2<f32>,
    pub mask: MaskSpec,
}

/// Split a clean/augmented pair with one mask. Masked frames of the context
/// hold [`CONTEXT_FILL`]; visible frames of both targets are zero.
pub fn apply_mask(
    clean: ArrayView2<f32>,
    augmented: ArrayView2<f32>,
    mask: &MaskSpec,
) -> Result<MaskedTriple> {
    if clean.dim() != augmented.dim() {
        return Err(Error::shape(clean.dim(), augmented.dim()));
    }
    if clean.nrows() != mask.len() {
        return Err(Error::shape(clean.nrows(), mask.len()));
    }
    let mut target_clean = clean.to_owned();
    let mut target_aug = augmented.to_owned();
    let mut context = augmented.to_owned();
    for (i, &m) in mask.flags().iter().enumerate() {
        if m {
            context.index_axis_mut(Axis(0), i).fill(CONTEXT_FILL);
        } else {
            target_clean.index_axis_mut(Axis(0), i).fill(0.0);
            target_aug.index_axis_mut(Axis(0), i).fill(0.0);
        }
    }
    Ok(MaskedTriple {
        target_clean,
        target_aug,
        context,
        mask: mask.clone(),
    })
}

impl MaskedTriple {
    /// Visible context with the masked region of `target_aug` put back.
    pub fn reassemble_augmented(&self) -> Array2<f32> {
        let mut out = self.context.clone();
        for (i, &m) in self.mask.flags().iter().enumerate() {
            if m {
                out.row_mut(i).assign(&self.target_aug.row(i));
            }
        }
        out
    }
}
