//! Small unconditional field network for low-dimensional flow-matching
//! sanity runs.

use bgflow_core::flowmatch::{ode_solve, ot_path, Solver};
use bgflow_core::seed::{derive_seed, stream_rng};
use ndarray::{concatenate, s, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adam::{AdamState, OptimizerConfig};
use crate::nn::{gelu, gelu_grad, sinusoid, Linear, ParamStore};
use crate::Result;

const TIME_DIM: usize = 16;

/// `[x, sinusoid(t)] → hidden → hidden → dim` with GELU activations.
pub struct FieldMlp {
    dim: usize,
    layers: [Linear; 3],
    params: ParamStore<f32>,
}

struct MlpCache {
    inp: Array2<f32>,
    pre: [Array2<f32>; 2],
    act: [Array2<f32>; 2],
}

impl FieldMlp {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xf1);
        let mut params = ParamStore::new();
        let layers = [
            Linear::new(&mut params, "l0", dim + TIME_DIM, hidden, &mut rng),
            Linear::new(&mut params, "l1", hidden, hidden, &mut rng),
            Linear::new(&mut params, "l2", hidden, dim, &mut rng),
        ];
        Self { dim, layers, params }
    }

    fn input(&self, x: &Array2<f32>, t: &[f32]) -> Array2<f32> {
        let mut te = Array2::zeros((x.nrows(), TIME_DIM));
        for (mut row, &ti) in te.rows_mut().into_iter().zip(t) {
            row.assign(&sinusoid::<f32>(ti as f64 * 100.0, TIME_DIM));
        }
        concatenate![Axis(1), x.view(), te.view()]
    }

    fn forward_cached(&self, x: &Array2<f32>, t: &[f32]) -> (Array2<f32>, MlpCache) {
        let ps = &self.params;
        let inp = self.input(x, t);
        let p0 = self.layers[0].forward(ps, inp.view());
        let a0 = p0.mapv(gelu);
        let p1 = self.layers[1].forward(ps, a0.view());
        let a1 = p1.mapv(gelu);
        let y = self.layers[2].forward(ps, a1.view());
        (
            y,
            MlpCache {
                inp,
                pre: [p0, p1],
                act: [a0, a1],
            },
        )
    }

    pub fn forward(&self, x: &Array2<f32>, t: f32) -> Array2<f32> {
        self.forward_cached(x, &vec![t; x.nrows()]).0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flow-matching regression onto `sampler`-drawn data; returns the loss per step.
    pub fn train(
        &mut self,
        mut sampler: impl FnMut(&mut dyn rand::RngCore) -> Vec<f32>,
        steps: usize,
        batch: usize,
        opt: &OptimizerConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        opt.validate()?;
        let mut adam = AdamState::new(&self.params);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut rng = stream_rng(derive_seed(seed, step as u64), 0xf2);
            let x1 = Array2::from_shape_vec(
                (batch, self.dim),
                (0..batch).flat_map(|_| sampler(&mut rng)).collect(),
            )
            .expect("sampler returns dim values");
            let x0 = Array2::<f32>::from_shape_simple_fn((batch, self.dim), || rng.sample(StandardNormal));
            let ts: Vec<f32> = (0..batch).map(|_| rng.random()).collect();
            let mut w = Array2::zeros((batch, self.dim));
            let mut u = Array2::zeros((batch, self.dim));
            for i in 0..batch {
                let a0 = x0.slice(s![i..i + 1, ..]).to_owned();
                let a1 = x1.slice(s![i..i + 1, ..]).to_owned();
                let (wi, ui) = ot_path(&a0, &a1, ts[i], 1e-5)?;
                w.row_mut(i).assign(&wi.row(0));
                u.row_mut(i).assign(&ui.row(0));
            }
            let (pred, cache) = self.forward_cached(&w, &ts);
            let resid = &pred - &u;
            let n = resid.len() as f32;
            losses.push(resid.iter().map(|r| (*r as f64).powi(2)).sum::<f64>() / n as f64);
            let dy = resid.mapv(|r| 2.0 * r / n);
            let mut g = self.params.zeros_like();
            let ps = &self.params;
            let mut d = self.layers[2].backward(ps, cache.act[1].view(), dy.view(), &mut g);
            Zip::from(&mut d).and(&cache.pre[1]).for_each(|d, &p| *d *= gelu_grad(p));
            let mut d = self.layers[1].backward(ps, cache.act[0].view(), d.view(), &mut g);
            Zip::from(&mut d).and(&cache.pre[0]).for_each(|d, &p| *d *= gelu_grad(p));
            self.layers[0].backward_params(cache.inp.view(), d.view(), &mut g);
            adam.update(opt, &mut self.params, &mut g);
        }
        Ok(losses)
    }

    /// Push `n` standard-normal samples through the learned flow.
    pub fn sample(&self, n: usize, n_steps: usize, solver: Solver, seed: u64) -> Result<Array2<f32>> {
        let mut rng = stream_rng(seed, 0xf3);
        let x0 = Array2::<f32>::from_shape_simple_fn((n, self.dim), || rng.sample(StandardNormal));
        Ok(ode_solve(|x: &Array2<f32>, t| self.forward(x, t), &x0, n_steps, solver)?)
    }
}
