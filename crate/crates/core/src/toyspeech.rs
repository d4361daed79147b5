//! Formant-style toy speech synthesizer.
//!
//! Produces speech-like audio with exact per-token durations: voiced
//! characters are additive harmonic series shaped by three formants,
//! fricatives are shaped noise and spaces are silence. Speakers differ in F0
//! and vocal-tract scale, which is what the reference embedder keys on.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream_rng};
use crate::signal::Waveform;
use crate::textfront::{CharTokenizer, Tokenizer, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub id: String,
    pub f0_hz: f64,
    /// Multiplies every formant frequency (shorter tracts → larger values).
    pub formant_scale: f64,
}

const FRICATIVES: &[char] = &['s', 'f', 'h', 'z', 'x', 'c', 'j', 'v'];

/// Formant triple (Hz) for a unit; deterministic per character.
fn formants(unit: char) -> [f64; 3] {
    match unit {
        'a' => [730.0, 1090.0, 2440.0],
        'e' => [530.0, 1840.0, 2480.0],
        'i' => [270.0, 2290.0, 3010.0],
        'o' => [570.0, 840.0, 2410.0],
        'u' => [300.0, 870.0, 2240.0],
        'y' => [300.0, 2100.0, 2700.0],
        _ => {
            let k = unit as u32;
            [
                250.0 + (k * 37 % 500) as f64,
                900.0 + (k * 53 % 1300) as f64,
                2300.0 + (k * 71 % 900) as f64,
            ]
        }
    }
}

fn is_fricative(unit: char) -> bool {
    FRICATIVES.contains(&unit)
}

/// Render `ids` with per-token `durations` (in frames of `hop` samples).
/// Output length is exactly `sum(durations) * hop`.
pub fn synthesize(
    vocab: &Vocabulary,
    ids: &[u32],
    durations: &[u32],
    speaker: &ToySpeaker,
    hop: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    if ids.len() != durations.len() {
        return Err(Error::shape(ids.len(), durations.len()));
    }
    let sr = sample_rate as f64;
    let total: usize = durations.iter().map(|d| *d as usize * hop).sum();
    let mut out = vec![0.0; total];
    let mut rng = stream_rng(seed, 0);
    let n_harm = ((sr / 2.0 - 200.0) / speaker.f0_hz).floor().max(1.0) as usize;
    let mut phases = vec![0.0f64; n_harm];
    let ramp = (0.006 * sr) as usize;
    let mut pos = 0usize;
    let mut prev_noise = 0.0;

    for (tok, (&id, &dur)) in ids.iter().zip(durations).enumerate() {
        let len = dur as usize * hop;
        let unit = vocab
            .unit(id)
            .ok_or_else(|| Error::InvalidArgument(format!("token id {id} not in vocabulary")))?
            .chars()
            .next()
            .unwrap_or(' ');
        if unit == ' ' {
            pos += len;
            continue;
        }
        let f = formants(unit).map(|x| x * speaker.formant_scale);
        let bw = [90.0, 120.0, 180.0];
        let gain = 0.12 + 0.04 * ((tok * 7 % 5) as f64 / 4.0);
        for i in 0..len {
            let n = pos + i;
            let t = n as f64 / sr;
            let edge = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
            let env = gain * (0.5 - 0.5 * (PI * edge).cos());
            // slow declination plus vibrato
            let f0 = speaker.f0_hz * (1.0 - 0.05 * t) * (1.0 + 0.01 * (2.0 * PI * 5.0 * t).sin());
            let mut s = 0.0;
            if is_fricative(unit) {
                let white: f64 = rng.random_range(-1.0..1.0);
                let hp = white - 0.85 * prev_noise;
                prev_noise = white;
                s += 0.6 * hp;
                for (h, ph) in phases.iter_mut().enumerate() {
                    *ph = (*ph + 2.0 * PI * f0 * (h + 1) as f64 / sr) % (2.0 * PI);
                }
            } else {
                for (h, ph) in phases.iter_mut().enumerate() {
                    let fh = f0 * (h + 1) as f64;
                    *ph = (*ph + 2.0 * PI * fh / sr) % (2.0 * PI);
                    if fh >= sr / 2.0 {
                        continue;
                    }
                    let amp: f64 = f
                        .iter()
                        .zip(bw)
                        .map(|(fk, b)| 1.0 / (1.0 + ((fh - fk) / b).powi(2)))
                        .sum::<f64>()
                        / (h + 1) as f64;
                    s += amp * ph.sin();
                }
                s += 0.01 * rng.random_range(-1.0..1.0);
            }
            out[n] = env * s;
        }
        pos += len;
    }
    Waveform::new(out, sample_rate)
}

/// Speaker set used by the toy corpus.
pub fn toy_speakers() -> Vec<ToySpeaker> {
    [(100.0, 0.95), (140.0, 1.0), (190.0, 1.1), (230.0, 1.2)]
        .iter()
        .enumerate()
        .map(|(i, &(f0_hz, formant_scale))| ToySpeaker {
            id: format!("spk{i}"),
            f0_hz,
            formant_scale,
        })
        .collect()
}

const WORDS: &[&str] = &[
    "sea", "blue", "cat", "go", "mix", "tone", "rain", "fox", "oak", "sun", "hop", "ice", "map", "low", "red",
    "wave", "home", "fish", "day", "zoo",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub text: String,
    pub speaker: ToySpeaker,
    pub ids: Vec<u32>,
    /// Frames per token at the corpus hop.
    pub durations: Vec<u32>,
    pub audio: Waveform,
}

fn base_duration(unit: char) -> i64 {
    match unit {
        'a' | 'e' | 'i' | 'o' | 'u' | 'y' => 6,
        ' ' => 4,
        c if is_fricative(c) => 5,
        _ => 3,
    }
}

/// `n` utterances of two or three words, speakers assigned round-robin,
/// with per-token durations from a character table plus a jitter of at
/// most one frame. Audio is `(Σd − 1)·hop` samples long, which is exactly
/// `Σd` mel frames.
pub fn toy_corpus(n: usize, hop: usize, sample_rate: u32, seed: u64) -> Result<Vec<ToyUtterance>> {
    let tok = CharTokenizer::default();
    let speakers = toy_speakers();
    let mut rng = stream_rng(seed, 3);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let n_words = rng.random_range(2..=3);
        let text = (0..n_words)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ");
        let seq = tok.tokenize(&text)?;
        let speaker = speakers[i % speakers.len()].clone();
        let durations = seq
            .ids
            .iter()
            .map(|&id| {
                let unit = tok.vocabulary().unit(id).and_then(|u| u.chars().next()).unwrap_or(' ');
                (base_duration(unit) + rng.random_range(-1..=1)).max(2) as u32
            })
            .collect::<Vec<_>>();
        let full = synthesize(
            tok.vocabulary(),
            &seq.ids,
            &durations,
            &speaker,
            hop,
            sample_rate,
            derive_seed(seed, i as u64),
        )?;
        // a centered STFT yields 1 + len/hop frames; drop one hop so the
        // durations sum to the mel frame count
        let total: usize = durations.iter().map(|&d| d as usize).sum();
        let audio = full.slice(0, (total - 1) * hop);
        out.push(ToyUtterance {
            id: format!("utt{i:04}"),
            text,
            speaker,
            ids: seq.ids,
            durations,
            audio,
        });
    }
    Ok(out)
}

/// Band-shaped stationary noise for augmentation pools. `kind` selects the
/// spectral shape: 0 hum (harmonics of 100 Hz), 1 low rumble, 2 hiss.
pub fn synthesize_noise(kind: usize, n_samples: usize, sample_rate: u32, seed: u64) -> Waveform {
    let sr = sample_rate as f64;
    let mut rng = stream_rng(seed, 1);
    let mut lp = 0.0;
    let mut prev = 0.0;
    let base = 90.0 + 40.0 * rng.random::<f64>();
    let samples = (0..n_samples)
        .map(|n| {
            let t = n as f64 / sr;
            let white: f64 = rng.random_range(-1.0..1.0);
            match kind % 3 {
                0 => {
                    (1..=12)
                        .map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64)
                        .sum::<f64>()
                        * 0.2
                        + 0.02 * white
                }
                1 => {
                    lp = 0.97 * lp + 0.03 * white;
                    4.0 * lp
                }
                _ => {
                    let hp = white - 0.9 * prev;
                    prev = white;
                    0.3 * hp
                }
            }
        })
        .collect();
    Waveform::new(samples, sample_rate).expect("finite noise")
}

/// Exponentially decaying noise-tail room impulse response with a unit
/// direct path.
pub fn synthesize_rir(rt60_secs: f64, sample_rate: u32, seed: u64) -> Waveform {
    let sr = sample_rate as f64;
    let len = (rt60_secs * sr).ceil().max(2.0) as usize;
    let mut rng = stream_rng(seed, 2);
    let decay = (1e-3f64).ln() / (rt60_secs * sr);
    let pre_delay = (0.002 * sr) as usize;
    let samples = (0..len)
        .map(|n| {
            if n == 0 {
                1.0
            } else if n < pre_delay {
                0.0
            } else {
                0.5 * (decay * n as f64).exp() * rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    Waveform::new(samples, sample_rate).expect("finite rir")
}
