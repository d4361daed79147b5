//! Turning manifests into model-ready features.

use std::path::Path;

use bgflow_core::augment::Condition;
use bgflow_core::signal::wav::read_wav;
use bgflow_core::signal::{resample, MelExtractor, Waveform};
use bgflow_core::textfront::{uniform_align, CharTokenizer, Tokenizer};
use bgflow_models::duration::expand_ids;
use bgflow_models::norm::MelNorm;
use bgflow_models::train::{AcousticExample, DurationExample};
use ndarray::Array2;

use crate::manifest::{Manifest, ManifestRecord};
use crate::{Error, Result};

/// Read a WAV and bring it to `sample_rate`.
pub fn load_wave(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let w = read_wav(path).map_err(|e| match e {
        bgflow_core::Error::Io(io) => Error::io(path, io),
        other => other.into(),
    })?;
    if w.sample_rate() == sample_rate {
        Ok(w)
    } else {
        Ok(resample(&w, sample_rate as i64)?)
    }
}

/// One manifest record with both mels extracted (unnormalized log-mel).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub speaker: String,
    pub ids: Vec<u32>,
    pub durations: Vec<u32>,
    pub clean: Array2<f32>,
    pub augmented: Array2<f32>,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub source_ids: Vec<String>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.clean.nrows()
    }

    pub fn frame_tokens(&self) -> Vec<u32> {
        expand_ids(&self.ids, &self.durations).expect("durations validated at load")
    }
}

pub fn load_utterances(
    manifest: &Manifest<ManifestRecord>,
    extractor: &MelExtractor,
    tokenizer: &CharTokenizer,
) -> Result<Vec<Utterance>> {
    let sr = extractor.config().sample_rate;
    let bad = |m: String| Error::manifest(&manifest.path, m);
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let aug_wave = load_wave(&manifest.resolve(&r.audio), sr)?;
        let augmented = extractor.extract(&aug_wave)?.into_frames();
        let clean = match &r.clean_audio {
            Some(p) => extractor.extract(&load_wave(&manifest.resolve(p), sr)?)?.into_frames(),
            None => augmented.clone(),
        };
        if clean.nrows() != augmented.nrows() {
            return Err(bad(format!(
                "record {:?}: clean and augmented audio differ in length ({} vs {} frames)",
                r.id,
                clean.nrows(),
                augmented.nrows()
            )));
        }
        let tokens = tokenizer.tokenize(&r.text)?;
        let durations = match &r.durations {
            Some(d) => {
                if d.len() != tokens.len() {
                    return Err(bad(format!(
                        "record {:?}: {} durations for {} tokens",
                        r.id,
                        d.len(),
                        tokens.len()
                    )));
                }
                let total: usize = d.iter().map(|&x| x as usize).sum();
                if total != clean.nrows() || d.contains(&0) {
                    return Err(bad(format!(
                        "record {:?}: durations sum to {total} but the audio has {} mel frames",
                        r.id,
                        clean.nrows()
                    )));
                }
                d.clone()
            }
            None => uniform_align(&tokens, clean.nrows())?.durations,
        };
        out.push(Utterance {
            id: r.id.clone(),
            text: r.text.clone(),
            speaker: r.speaker.clone(),
            ids: tokens.ids,
            durations,
            clean,
            augmented,
            condition: r.condition.unwrap_or(Condition::Clean),
            snr_db: r.snr_db,
            source_ids: r.source_ids.clone().unwrap_or_default(),
        });
    }
    Ok(out)
}

pub fn fit_norm(utts: &[Utterance]) -> Result<MelNorm> {
    Ok(MelNorm::fit(utts.iter().map(|u| &u.clean))?)
}

pub fn acoustic_examples(utts: &[Utterance], norm: &MelNorm) -> Vec<AcousticExample> {
    utts.iter()
        .map(|u| AcousticExample {
            id: u.id.clone(),
            clean: norm.normalize(&u.clean),
            augmented: norm.normalize(&u.augmented),
            frame_tokens: u.frame_tokens(),
        })
        .collect()
}

pub fn duration_examples(utts: &[Utterance]) -> Vec<DurationExample> {
    utts.iter()
        .map(|u| DurationExample {
            id: u.id.clone(),
            ids: u.ids.clone(),
            durations: u.durations.clone(),
        })
        .collect()
}
