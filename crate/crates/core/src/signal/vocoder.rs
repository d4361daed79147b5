use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::{MelExtractor, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::linalg::right_pseudo_inverse;

const MOMENTUM: f64 = 0.99;
/// Multiplicative non-negative least-squares refinements of the clamped
/// pseudo-inverse magnitudes.
const NNLS_ITERS: usize = 100;

/// Reference vocoder: mel → linear magnitude through the filterbank
/// pseudo-inverse (clamped at zero, then refined towards the non-negative
/// least-squares solution), followed by fast Griffin-Lim phase recovery.
///
/// Output length is `n_frames * hop`. Identical `(mel, n_iters, seed)`
/// always produce identical samples.
pub fn griffin_lim_vocode(
    extractor: &MelExtractor,
    mel: &MelSpectrogram,
    n_iters: usize,
    seed: u64,
) -> Result<Waveform> {
    if n_iters < 1 {
        return Err(Error::InvalidArgument("griffin-lim needs at least one iteration".into()));
    }
    if mel.is_empty() {
        return Err(Error::EmptyInput("cannot vocode an empty mel".into()));
    }
    let cfg = extractor.config();
    if mel.n_bins() != cfg.n_mels {
        return Err(Error::shape(cfg.n_mels, mel.n_bins()));
    }
    let n_frames = mel.n_frames();
    let out_len = n_frames * cfg.hop_length;

    let pinv = right_pseudo_inverse(extractor.filterbank());
    let energies: Array2<f64> = mel.frames().mapv(|v| (v as f64).exp());
    let mags = mel_to_linear(extractor.filterbank(), &pinv, &energies);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angles: Vec<Vec<Complex<f64>>> = (0..n_frames)
        .map(|_| {
            (0..cfg.n_freqs())
                .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let mut previous: Option<Vec<Vec<Complex<f64>>>> = None;

    let apply = |angles: &[Vec<Complex<f64>>]| -> Vec<Vec<Complex<f64>>> {
        angles
            .iter()
            .enumerate()
            .map(|(t, row)| row.iter().enumerate().map(|(j, a)| a * mags[[t, j]]).collect())
            .collect()
    };

    for _ in 0..n_iters {
        let signal = extractor.istft(&apply(&angles), out_len);
        let mut rebuilt = extractor.stft(&signal);
        rebuilt.truncate(n_frames);
        for (t, row) in angles.iter_mut().enumerate() {
            for (j, a) in row.iter_mut().enumerate() {
                let mut z = rebuilt[t][j];
                if let Some(prev) = &previous {
                    z -= prev[t][j] * (MOMENTUM / (1.0 + MOMENTUM));
                }
                let norm = z.norm();
                *a = if norm > 1e-16 { z / norm } else { Complex::new(1.0, 0.0) };
            }
        }
        previous = Some(rebuilt);
    }
    Waveform::new(extractor.istft(&apply(&angles), out_len), cfg.sample_rate)
}

fn mel_to_linear(
    filterbank: &Array2<f64>,
    pinv: &Array2<f64>,
    energies: &Array2<f64>,
) -> Array2<f64> {
    // strictly positive start so multiplicative updates can move every bin
    let mut mags = energies.dot(&pinv.t()).mapv(|v| v.max(1e-8));
    let numer = energies.dot(filterbank);
    let gram = filterbank.t().dot(filterbank);
    for _ in 0..NNLS_ITERS {
        let denom = mags.dot(&gram);
        ndarray::Zip::from(&mut mags)
            .and(&numer)
            .and(&denom)
            .for_each(|m, &n, &d| *m *= n / (d + 1e-12));
    }
    mags
}
