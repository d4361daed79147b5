//! Central-difference gradient checking in 64-bit precision.

use bgflow_core::seed::stream_rng;
use ndarray::{Array1, Array2};
use rand::Rng;

use crate::acoustic::{AcousticInput, AcousticModel};
use crate::duration::{DurationInput, DurationModel};
use crate::nn::{Grads, ParamStore};
use crate::Result;

/// A scalar function of a parameter store with an analytic gradient.
pub trait Differentiable {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grads(&self) -> Result<(f64, Grads<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

/// Compare analytic gradients with `(L(θ+ε) − L(θ−ε)) / 2ε` at `n_samples`
/// uniformly drawn scalar parameters. The error per sample is
/// `|a − n| / (|a| + 1e-8)`.
pub fn gradient_check<M: Differentiable>(
    module: &mut M,
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = module.loss_and_grads()?;
    let sizes: Vec<usize> = module.params().values().iter().map(|v| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = stream_rng(seed, 0x6c);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let cols = module.params().values()[tensor].ncols();
        let idx = (flat / cols, flat % cols);
        let original = module.params().values()[tensor][idx];
        module.params_mut().values_mut()[tensor][idx] = original + epsilon;
        let up = module.loss()?;
        module.params_mut().values_mut()[tensor][idx] = original - epsilon;
        let down = module.loss()?;
        module.params_mut().values_mut()[tensor][idx] = original;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grads.0[tensor][idx];
        samples.push(GradSample {
            param: module.params().names()[tensor].clone(),
            index: idx,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / (analytic.abs() + 1e-8),
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, samples })
}

/// `L = Σ r ⊙ f(x)` for the acoustic model, with fixed random weights `r`.
pub struct AcousticProbe {
    pub model: AcousticModel<f64>,
    pub batch: Vec<AcousticInput<f64>>,
    pub weights: Array2<f64>,
}

impl AcousticProbe {
    pub fn new(model: AcousticModel<f64>, batch: Vec<AcousticInput<f64>>, seed: u64) -> Self {
        let rows: usize = batch.iter().map(|x| x.n_frames()).sum();
        let m = model.config().n_mels;
        let mut rng = stream_rng(seed, 0x77);
        let weights = Array2::from_shape_simple_fn((rows, m), || rng.random_range(-1.0..1.0));
        Self { model, batch, weights }
    }
}

impl Differentiable for AcousticProbe {
    fn params(&self) -> &ParamStore<f64> {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.model.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let (y, _) = self.model.forward_batch(&self.batch)?;
        Ok((y * &self.weights).sum())
    }

    fn loss_and_grads(&self) -> Result<(f64, Grads<f64>)> {
        let (y, cache) = self.model.forward_batch(&self.batch)?;
        let loss = (&y * &self.weights).sum();
        Ok((loss, self.model.backward(&cache, &self.weights)))
    }
}

pub struct DurationProbe {
    pub model: DurationModel<f64>,
    pub batch: Vec<DurationInput>,
    pub weights: Array1<f64>,
}

impl DurationProbe {
    pub fn new(model: DurationModel<f64>, batch: Vec<DurationInput>, seed: u64) -> Self {
        let rows: usize = batch.iter().map(DurationInput::len).sum();
        let mut rng = stream_rng(seed, 0x78);
        let weights = Array1::from_shape_simple_fn(rows, || rng.random_range(-1.0..1.0));
        Self { model, batch, weights }
    }
}

impl Differentiable for DurationProbe {
    fn params(&self) -> &ParamStore<f64> {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.model.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let (y, _) = self.model.forward_batch(&self.batch)?;
        Ok((y * &self.weights).sum())
    }

    fn loss_and_grads(&self) -> Result<(f64, Grads<f64>)> {
        let (y, cache) = self.model.forward_batch(&self.batch)?;
        let loss = (&y * &self.weights).sum();
        Ok((loss, self.model.backward(&cache, &self.weights)))
    }
}
