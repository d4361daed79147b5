//! Acoustic condition simulation: additive noise, reverberation and an
//! interfering speaker, each mixed at an exactly controlled SNR.

use std::fmt;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{mean_square, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noise,
    Reverb,
    Interference,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Clean,
        Condition::Noise,
        Condition::Reverb,
        Condition::Interference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noise => "noise",
            Condition::Reverb => "reverb",
            Condition::Interference => "interference",
        }
    }

    /// Whether outcomes of this condition carry an SNR.
    pub fn has_snr(self) -> bool {
        matches!(self, Condition::Noise | Condition::Interference)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition {s:?}")))
    }
}

/// Closed SNR interval in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnrRange {
    pub min: f64,
    pub max: f64,
}

impl SnrRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::Config(format!(
                "{name} must be a finite interval with min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub p_clean: f64,
    pub p_noise: f64,
    pub p_reverb: f64,
    pub p_interf: f64,
    pub noise_snr_db: SnrRange,
    pub interf_snr_db: SnrRange,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_clean: 0.4,
            p_noise: 0.2,
            p_reverb: 0.2,
            p_interf: 0.2,
            noise_snr_db: SnrRange::new(-5.0, 10.0),
            interf_snr_db: SnrRange::new(1.0, 10.0),
        }
    }
}

impl AugmentationConfig {
    /// Always returns the clean condition.
    pub fn clean_only() -> Self {
        Self {
            p_clean: 1.0,
            p_noise: 0.0,
            p_reverb: 0.0,
            p_interf: 0.0,
            ..Self::default()
        }
    }

    pub fn probabilities(&self) -> [f64; 4] {
        [self.p_clean, self.p_noise, self.p_reverb, self.p_interf]
    }

    pub fn probability(&self, c: Condition) -> f64 {
        self.probabilities()[c as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let probs = self.probabilities();
        for (c, p) in Condition::ALL.iter().zip(probs) {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Config(format!(
                    "augment probability for {c} must be non-negative, got {p}"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "augment probabilities must sum to 1, got {sum}"
            )));
        }
        self.noise_snr_db.validate("augment.noise_snr_db")?;
        self.interf_snr_db.validate("augment.interf_snr_db")?;
        if self.interf_snr_db.min <= 0.0 {
            return Err(Error::Config(format!(
                "augment.interf_snr_db.min must be > 0 dB so the main speaker dominates, got {}",
                self.interf_snr_db.min
            )));
        }
        Ok(())
    }

    /// Draw a condition according to the configured probabilities.
    pub fn draw_condition<R: Rng + ?Sized>(&self, rng: &mut R) -> Condition {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, p) in Condition::ALL.iter().zip(self.probabilities()) {
            acc += p;
            if u < acc {
                return *c;
            }
        }
        // rounding left a sliver above the cumulative sum
        *Condition::ALL
            .iter()
            .rev()
            .find(|c| self.probability(**c) > 0.0)
            .unwrap_or(&Condition::Clean)
    }
}

/// One corpus item usable as noise, RIR or interfering speech.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub id: String,
    pub speaker: Option<String>,
    pub audio: Waveform,
}

#[derive(Debug, Clone, Default)]
pub struct AugmentationPools {
    pub noise: Vec<PoolEntry>,
    pub rir: Vec<PoolEntry>,
    pub interferers: Vec<PoolEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationOutcome {
    pub clean: Waveform,
    pub augmented: Waveform,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub source_ids: Vec<String>,
}

fn check_rates(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate(),
            b.sample_rate()
        )));
    }
    Ok(())
}

/// Scale `noise` so that `10·log10(P_signal / P_scaled) = snr_db` with powers
/// measured over the full length, and add it to `signal`.
///
/// Returns `(mixed, scaled_noise)`.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    check_rates(signal, noise)?;
    if signal.len() != noise.len() {
        return Err(Error::shape(signal.len(), noise.len()));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr must be finite, got {snr_db}")));
    }
    let p_signal = signal.power();
    let p_noise = noise.power();
    if p_signal <= 0.0 {
        return Err(Error::Degenerate("signal has zero power".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::Degenerate("noise has zero power".into()));
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.samples().iter().map(|n| n * gain).collect();
    let mixed: Vec<f64> = signal
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(s, n)| s + n)
        .collect();
    let rate = signal.sample_rate();
    Ok((Waveform::new(mixed, rate)?, Waveform::new(scaled, rate)?))
}

/// `10·log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_square(signal) / mean_square(noise)).log10()
}

/// Convolve with an RIR whose direct-path peak is normalized to magnitude 1,
/// truncating to the input length.
pub fn apply_rir(signal: &Waveform, rir: &Waveform) -> Result<Waveform> {
    check_rates(signal, rir)?;
    if rir.is_empty() {
        return Err(Error::InvalidArgument("empty RIR".into()));
    }
    let peak = rir.peak();
    if peak <= 0.0 {
        return Err(Error::Degenerate("RIR is all zeros".into()));
    }
    let kernel: Vec<f64> = rir.samples().iter().map(|v| v / peak).collect();
    let out = convolve_truncated(signal.samples(), &kernel);
    Waveform::new(out, signal.sample_rate())
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let h = &h[..h.len().min(n)];
    if n.saturating_mul(h.len()) <= 1 << 16 {
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate().take(i + 1) {
                acc += hk * x[i - k];
            }
            *o = acc;
        }
        return out;
    }
    let size = (n + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Mix an interfering talker under `main` at `snr_db`. Positive SNR keeps the
/// main talker dominant.
pub fn mix_interference(main: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_at_snr(main, interferer, snr_db).map(|(mixed, _)| mixed)
}

/// Loop (with a random circular offset) or randomly crop `audio` to `len`.
pub fn fit_length<R: Rng + ?Sized>(audio: &Waveform, len: usize, rng: &mut R) -> Result<Waveform> {
    if audio.is_empty() {
        return Err(Error::InvalidArgument("cannot fit an empty waveform".into()));
    }
    let src = audio.samples();
    let samples = if src.len() >= len {
        let start = rng.random_range(0..=src.len() - len);
        src[start..start + len].to_vec()
    } else {
        let offset = rng.random_range(0..src.len());
        (0..len).map(|i| src[(offset + i) % src.len()]).collect()
    };
    Waveform::new(samples, audio.sample_rate())
}

fn pick<'a, R: Rng + ?Sized>(
    entries: &[&'a PoolEntry],
    what: &str,
    rng: &mut R,
) -> Result<&'a PoolEntry> {
    if entries.is_empty() {
        return Err(Error::Config(format!("{what} pool is empty")));
    }
    Ok(entries[rng.random_range(0..entries.len())])
}

/// Draw one acoustic condition for `clean` (spoken by `speaker`) and simulate it.
pub fn sample_augmentation<R: Rng + ?Sized>(
    clean: &Waveform,
    speaker: &str,
    cfg: &AugmentationConfig,
    pools: &AugmentationPools,
    rng: &mut R,
) -> Result<AugmentationOutcome> {
    let condition = cfg.draw_condition(rng);
    let (augmented, snr_db, source_ids) = match condition {
        Condition::Clean => (clean.clone(), None, Vec::new()),
        Condition::Noise => {
            let entries: Vec<&PoolEntry> = pools.noise.iter().collect();
            let entry = pick(&entries, "noise", rng)?;
            let noise = fit_length(&entry.audio, clean.len(), rng)?;
            let snr = cfg.noise_snr_db.sample(rng);
            let (mixed, _) = mix_at_snr(clean, &noise, snr)?;
            (mixed, Some(snr), vec![entry.id.clone()])
        }
        Condition::Reverb => {
            let entries: Vec<&PoolEntry> = pools.rir.iter().collect();
            let entry = pick(&entries, "rir", rng)?;
            (apply_rir(clean, &entry.audio)?, None, vec![entry.id.clone()])
        }
        Condition::Interference => {
            let entries: Vec<&PoolEntry> = pools
                .interferers
                .iter()
                .filter(|e| e.speaker.as_deref() != Some(speaker))
                .collect();
            let entry = pick(&entries, "interferer (other speakers)", rng)?;
            let other = fit_length(&entry.audio, clean.len(), rng)?;
            let snr = cfg.interf_snr_db.sample(rng);
            (
                mix_interference(clean, &other, snr)?,
                Some(snr),
                vec![entry.id.clone()],
            )
        }
    };
    Ok(AugmentationOutcome {
        clean: clean.clone(),
        augmented,
        condition,
        snr_db,
        source_ids,
    })
}
