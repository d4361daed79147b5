use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side of the output point.
const ZERO_CROSSINGS: f64 = 24.0;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`. Equal rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_rate_hz: i64) -> Result<Waveform> {
    if target_rate_hz <= 0 || target_rate_hz > u32::MAX as i64 {
        return Err(Error::InvalidArgument(format!(
            "target sample rate must be positive, got {target_rate_hz}"
        )));
    }
    let target = target_rate_hz as u32;
    let source = w.sample_rate();
    if target == source {
        return Ok(w.clone());
    }
    let ratio = target as f64 / source as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let input = w.samples();
    // cutoff relative to the source Nyquist
    let cutoff = ratio.min(1.0) * ROLLOFF;
    let half_width = ZERO_CROSSINGS / cutoff;
    let norm = bessel_i0(KAISER_BETA);

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let centre = n as f64 / ratio;
        let lo = (centre - half_width).ceil().max(0.0) as usize;
        let hi = ((centre + half_width).floor() as i64).min(input.len() as i64 - 1);
        let mut acc = 0.0;
        if hi >= lo as i64 {
            for (k, &x) in input.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let tau = k as f64 - centre;
                let r = tau / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                acc += x * cutoff * sinc(cutoff * tau) * window;
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    fn peak_frequency(w: &Waveform) -> f64 {
        let n = w.len();
        let mut buf: Vec<Complex<f64>> =
            w.samples().iter().map(|&s| Complex::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (bin, _) = buf[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        bin as f64 * w.sample_rate() as f64 / n as f64
    }

    #[test]
    fn same_rate_is_identity() {
        let w = sine(440.0, 16000, 0.1);
        let out = resample(&w, 16000).unwrap();
        let err = w
            .samples()
            .iter()
            .zip(out.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6);
    }

    #[test]
    fn downsampled_sine_keeps_its_frequency() {
        let w = sine(1000.0, 48000, 1.0);
        let out = resample(&w, 16000).unwrap();
        assert_eq!(out.len(), 16000);
        assert_eq!(out.sample_rate(), 16000);
        let f = peak_frequency(&out);
        assert!((f - 1000.0).abs() <= 1.0, "peak at {f} Hz");
        // amplitude preserved in the interior
        let mid = out.slice(4000, 12000);
        assert!((mid.peak() - 0.5).abs() < 0.01, "peak {}", mid.peak());
    }

    #[test]
    fn upsampling_length_and_frequency() {
        let w = sine(1000.0, 8000, 0.5);
        let out = resample(&w, 16000).unwrap();
        assert_eq!(out.len(), 8000);
        assert!((peak_frequency(&out) - 1000.0).abs() <= 2.0);
    }

    #[test]
    fn zero_stays_zero() {
        let w = Waveform::silence(4410, 44100);
        let out = resample(&w, 16000).unwrap();
        assert_eq!(out.len(), 1600);
        assert!(out.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rejects_non_positive_rate() {
        let w = Waveform::silence(10, 16000);
        assert!(matches!(resample(&w, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(resample(&w, -16000), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn removes_content_above_new_nyquist() {
        // 7 kHz at 48 kHz is above the 4 kHz Nyquist of an 8 kHz output
        let w = sine(7000.0, 48000, 0.5);
        let out = resample(&w, 8000).unwrap();
        let mid = out.slice(500, 3500);
        assert!(mid.peak() < 0.01, "alias leaked with peak {}", mid.peak());
    }
}
