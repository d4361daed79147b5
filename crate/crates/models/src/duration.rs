//! Masked-regression duration predictor over token sequences.

use bgflow_core::seed::stream_rng;
use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::acoustic::check_layout;
use crate::nn::{
    add_positions, check_finite, sc, segments, Embedding, Grads, Linear, ParamStore, Scalar, Transformer,
    TransformerCache,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DurationModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
}

impl Default for DurationModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 16,
            dim: 1024,
            vocab_size: 37,
            token_dim: 64,
        }
    }
}

impl DurationModelConfig {
    /// Desk-scale preset matching the acoustic backbone (2 layers, 4 heads, 256).
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("dim", self.dim),
            ("vocab_size", self.vocab_size),
            ("token_dim", self.token_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("duration {name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "duration dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// `log(d + 1)`, the regression domain.
pub fn log_duration(d: u32) -> f64 {
    (d as f64 + 1.0).ln()
}

/// Inverse of [`log_duration`], rounded and floored at one frame.
pub fn frames_from_log(p: f64) -> u32 {
    let d = (p.exp() - 1.0).round();
    if d.is_finite() && d >= 1.0 {
        d.min(u32::MAX as f64) as u32
    } else {
        1
    }
}

/// Token ids with visible durations; `masked[i]` hides `durations[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationInput {
    pub ids: Vec<u32>,
    /// Frame counts; entries under the mask are ignored.
    pub durations: Vec<u32>,
    pub masked: Vec<bool>,
}

impl DurationInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Visible-duration channel with the sentinel 0 under the mask.
    pub fn y_ctx(&self) -> Vec<f64> {
        self.durations
            .iter()
            .zip(&self.masked)
            .map(|(&d, &m)| if m { 0.0 } else { log_duration(d) })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct DurationArch {
    embed: Embedding,
    in_proj: Linear,
    body: Transformer,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct DurationModel<S> {
    cfg: DurationModelConfig,
    arch: DurationArch,
    params: ParamStore<S>,
}

#[derive(Debug, Clone)]
pub struct DurationCache<S> {
    segs: Vec<std::ops::Range<usize>>,
    ids: Vec<Vec<u32>>,
    x_in: Array2<S>,
    body: TransformerCache<S>,
    body_out: Array2<S>,
}

impl<S: Scalar> DurationModel<S> {
    pub fn new(cfg: DurationModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0xd0d0);
        let mut ps = ParamStore::new();
        let embed = Embedding::new(&mut ps, "embed", cfg.vocab_size, cfg.token_dim, &mut rng);
        let in_proj = Linear::new(&mut ps, "in_proj", cfg.token_dim + 2, cfg.dim, &mut rng);
        let body = Transformer::new(&mut ps, "body", cfg.layers, cfg.dim, cfg.heads, &mut rng);
        let head = Linear::new(&mut ps, "head", cfg.dim, 1, &mut rng);
        Ok(Self {
            cfg,
            arch: DurationArch {
                embed,
                in_proj,
                body,
                head,
            },
            params: ps,
        })
    }

    pub fn from_params(cfg: DurationModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        check_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &DurationModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> DurationModel<T> {
        DurationModel {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn check(&self, x: &DurationInput) -> Result<()> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if x.durations.len() != x.len() || x.masked.len() != x.len() {
            return Err(Error::Shape(format!(
                "{} ids, {} durations, {} mask flags",
                x.len(),
                x.durations.len(),
                x.masked.len()
            )));
        }
        if let Some(bad) = x.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Predicted `log(d + 1)` for every token of every sequence, stacked.
    pub fn forward_batch(&self, batch: &[DurationInput]) -> Result<(Array1<S>, DurationCache<S>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for x in batch {
            self.check(x)?;
        }
        let ps = &self.params;
        let a = &self.arch;
        let dt = self.cfg.token_dim;
        let segs = segments(batch.iter().map(DurationInput::len));
        let n = segs.last().map_or(0, |r| r.end);
        let mut x_in = Array2::<S>::zeros((n, dt + 2));
        for (x, seg) in batch.iter().zip(&segs) {
            let mut rows = x_in.slice_mut(s![seg.clone(), ..]);
            rows.slice_mut(s![.., 0..dt]).assign(&a.embed.forward(ps, &x.ids));
            for (i, (y, &m)) in x.y_ctx().iter().zip(&x.masked).enumerate() {
                rows[[i, dt]] = sc(*y);
                rows[[i, dt + 1]] = if m { S::one() } else { S::zero() };
            }
        }
        let mut h = a.in_proj.forward(ps, x_in.view());
        add_positions(&mut h, &segs);
        let (body_out, body) = a.body.forward(ps, h, &segs);
        let out = a.head.forward(ps, body_out.view());
        check_finite(&out, "duration model output")?;
        Ok((
            out.column(0).to_owned(),
            DurationCache {
                segs,
                ids: batch.iter().map(|x| x.ids.clone()).collect(),
                x_in,
                body,
                body_out,
            },
        ))
    }

    pub fn backward(&self, cache: &DurationCache<S>, d_out: &Array1<S>) -> Grads<S> {
        let ps = &self.params;
        let a = &self.arch;
        let dt = self.cfg.token_dim;
        let mut g = ps.zeros_like();
        let d_out = d_out.view().insert_axis(ndarray::Axis(1));
        let d_body = a.head.backward(ps, cache.body_out.view(), d_out, &mut g);
        let dh = a.body.backward(ps, &cache.body, &cache.segs, d_body.view(), &mut g);
        a.in_proj.backward_params(cache.x_in.view(), dh.view(), &mut g);
        let w_e = ps.get(a.in_proj.w).slice(s![0..dt, ..]).to_owned();
        for (seg, ids) in cache.segs.iter().zip(&cache.ids) {
            let de = dh.slice(s![seg.clone(), ..]).dot(&w_e.t());
            a.embed.backward(ids, de.view(), &mut g);
        }
        g
    }

    /// Predicted log-durations of one sequence, all tokens.
    pub fn predict_log(&self, x: &DurationInput) -> Result<Vec<f64>> {
        let (out, _) = self.forward_batch(std::slice::from_ref(x))?;
        Ok(out.iter().map(|v| num_traits::NumCast::from(*v).unwrap()).collect())
    }

    /// Frame counts for the masked tokens only, in order; at least 1 each.
    pub fn predict_masked(&self, x: &DurationInput) -> Result<Vec<u32>> {
        let logs = self.predict_log(x)?;
        Ok(logs
            .iter()
            .zip(&x.masked)
            .filter(|(_, &m)| m)
            .map(|(p, _)| frames_from_log(*p))
            .collect())
    }
}

/// Repeat row `i` of `embeddings` `durations[i]` times.
pub fn expand_durations<S: Clone + num_traits::Zero>(embeddings: &Array2<S>, durations: &[u32]) -> Result<Array2<S>> {
    if embeddings.nrows() == 0 {
        return Err(Error::InvalidArgument("no tokens to expand".into()));
    }
    if durations.len() != embeddings.nrows() {
        return Err(Error::Shape(format!(
            "{} durations for {} tokens",
            durations.len(),
            embeddings.nrows()
        )));
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("duration of token {i} is zero")));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let mut out = Array2::zeros((total, embeddings.ncols()));
    let mut r = 0;
    for (row, &d) in embeddings.rows().into_iter().zip(durations) {
        for _ in 0..d {
            out.row_mut(r).assign(&row);
            r += 1;
        }
    }
    Ok(out)
}

/// Frame-level token ids for `ids` with `durations`.
pub fn expand_ids(ids: &[u32], durations: &[u32]) -> Result<Vec<u32>> {
    let col = Array2::from_shape_vec((ids.len(), 1), ids.to_vec()).expect("column shape");
    Ok(expand_durations(&col, durations)?.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn expansion_examples() {
        let e = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(expand_durations(&e, &[1, 1]).unwrap(), e);
        let x = expand_durations(&e, &[2, 3]).unwrap();
        assert_eq!(x.nrows(), 5);
        assert_eq!(x.row(1), e.row(0));
        assert_eq!(x.row(4), e.row(1));
        assert!(matches!(expand_durations(&e, &[0, 1]), Err(Error::InvalidArgument(_))));
        assert_eq!(expand_ids(&[7, 9], &[2, 3]).unwrap(), vec![7, 7, 9, 9, 9]);
    }

    #[test]
    fn rounding_floor() {
        assert_eq!(frames_from_log(-5.0), 1);
        assert_eq!(frames_from_log(0.0), 1);
        assert_eq!(frames_from_log(log_duration(7)), 7);
        assert_eq!(frames_from_log(f64::NAN), 1);
    }

    fn tiny() -> DurationModelConfig {
        DurationModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            vocab_size: 6,
            token_dim: 4,
        }
    }

    #[test]
    fn zero_masked_gives_empty_prediction() {
        let m = DurationModel::<f64>::new(tiny(), 1).unwrap();
        let x = DurationInput {
            ids: vec![1, 2, 3],
            durations: vec![3, 4, 5],
            masked: vec![false; 3],
        };
        assert!(m.predict_masked(&x).unwrap().is_empty());
        let empty = DurationInput {
            ids: vec![],
            durations: vec![],
            masked: vec![],
        };
        assert!(matches!(m.predict_log(&empty), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn masked_predictions_are_at_least_one_frame() {
        let m = DurationModel::<f64>::new(tiny(), 2).unwrap();
        let x = DurationInput {
            ids: vec![0, 1, 2, 3, 4],
            durations: vec![2, 2, 2, 2, 2],
            masked: vec![false, true, true, false, true],
        };
        let p = m.predict_masked(&x).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&d| d >= 1));
        assert_eq!(x.y_ctx()[1], 0.0);
    }

    proptest! {
        #[test]
        fn expansion_length_is_duration_sum(durs in proptest::collection::vec(1u32..9, 1..20)) {
            let e = Array2::from_shape_fn((durs.len(), 3), |(i, j)| (i * 3 + j) as f64);
            let x = expand_durations(&e, &durs).unwrap();
            prop_assert_eq!(x.nrows(), durs.iter().map(|&d| d as usize).sum::<usize>());
        }
    }
}
