use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// STFT and mel filterbank settings. Fixed for a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Natural-log floor applied to mel magnitudes.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 256,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: (1e-5f64).ln(),
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 {
            return bad("mel.sample_rate must be positive".into());
        }
        if self.n_fft < 2 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("mel.n_fft must be >= 2, hop_length and n_mels positive".into());
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad(format!(
                "mel.win_length must be in 1..={} (n_fft), got {}",
                self.n_fft, self.win_length
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "mel frequency range must satisfy 0 <= f_min < f_max <= {nyquist}"
            ));
        }
        if !self.log_floor.is_finite() {
            return bad("mel.log_floor must be finite".into());
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `1 + floor(len / hop)` frames under centered padding.
    pub fn n_frames_for(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_length
    }
}

pub(crate) fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub(crate) fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed window, filterbank and FFT plans for one [`MelConfig`].
#[derive(Clone)]
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    filterbank: Array2<f64>,
    centers_hz: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(cfg.n_fft);
        let inverse = planner.plan_fft_inverse(cfg.n_fft);

        // periodic Hann, centered inside the FFT frame when shorter
        let mut window = vec![0.0; cfg.n_fft];
        let offset = (cfg.n_fft - cfg.win_length) / 2;
        for i in 0..cfg.win_length {
            window[offset + i] =
                0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_length as f64).cos();
        }

        let n_freqs = cfg.n_freqs();
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filterbank = Array2::zeros((cfg.n_mels, n_freqs));
        for m in 0..cfg.n_mels {
            let (left, centre, right) = (points[m], points[m + 1], points[m + 2]);
            for j in 0..n_freqs {
                let f = j as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                let rise = (f - left) / (centre - left);
                let fall = (right - f) / (right - centre);
                filterbank[[m, j]] = rise.min(fall).max(0.0);
            }
        }
        let centers_hz = points[1..=cfg.n_mels].to_vec();
        Ok(Self {
            cfg,
            window,
            filterbank,
            centers_hz,
            forward,
            inverse,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Triangle filters, `n_mels × n_freqs`, peak weight 1.
    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Centre frequency in Hz of each mel bin.
    pub fn bin_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Log-mel spectrogram of `w`. The waveform must already be at the
    /// configured sample rate.
    pub fn extract(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.is_empty() {
            return Err(Error::EmptyInput("cannot extract mel from an empty waveform".into()));
        }
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "waveform is at {} Hz, mel config expects {} Hz",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let spec = self.stft(w.samples());
        let n_frames = spec.len();
        let n_freqs = self.cfg.n_freqs();
        let mut mags = Array2::<f64>::zeros((n_frames, n_freqs));
        for (t, frame) in spec.iter().enumerate() {
            for (j, c) in frame.iter().enumerate() {
                mags[[t, j]] = c.norm();
            }
        }
        Ok(self.mel_from_magnitudes(&mags))
    }

    pub(crate) fn mel_from_magnitudes(&self, mags: &Array2<f64>) -> MelSpectrogram {
        let mel = mags.dot(&self.filterbank.t());
        let floor = self.cfg.log_floor.exp();
        let frames = mel.mapv(|v| v.max(floor).ln() as f32);
        MelSpectrogram { frames }
    }

    /// Centered (reflect-padded) STFT; one `n_freqs` vector per frame.
    pub(crate) fn stft(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop_length;
        let pad = n_fft / 2;
        let n_frames = self.cfg.n_frames_for(samples.len());
        let n_freqs = self.cfg.n_freqs();
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = (t * hop + i) as i64 - pad as i64;
                *b = Complex::new(samples[reflect(idx, samples.len())] * self.window[i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..n_freqs].to_vec());
        }
        out
    }

    /// Weighted overlap-add inverse of [`Self::stft`], trimmed to `out_len`
    /// samples of the unpadded signal.
    pub(crate) fn istft(&self, spec: &[Vec<Complex<f64>>], out_len: usize) -> Vec<f64> {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop_length;
        let pad = n_fft / 2;
        let total = out_len + 2 * pad + n_fft;
        let mut acc = vec![0.0; total];
        let mut wsum = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for (t, frame) in spec.iter().enumerate() {
            for j in 0..n_fft {
                buf[j] = if j < frame.len() {
                    frame[j]
                } else {
                    frame[n_fft - j].conj()
                };
            }
            // DC and Nyquist of a real signal are real
            buf[0].im = 0.0;
            if n_fft.is_multiple_of(2) {
                buf[n_fft / 2].im = 0.0;
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            for i in 0..n_fft {
                if start + i >= total {
                    break;
                }
                let w = self.window[i];
                acc[start + i] += buf[i].re / n_fft as f64 * w;
                wsum[start + i] += w * w;
            }
        }
        (0..out_len)
            .map(|n| {
                let k = n + pad;
                if wsum[k] > 1e-8 {
                    acc[k] / wsum[k]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Reflect an out-of-range index back into `0..len`, bouncing as often as
/// needed so very short signals still pad.
fn reflect(idx: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let mut i = idx.rem_euclid(period);
    if i >= len as i64 {
        i = period - i;
    }
    i as usize
}
