//! Transformer vector-field estimator with optional speaker encoders.
//!
//! Backbone input per frame is `[w, x_ctx, z, c]` projected to the model
//! width, plus sinusoidal positions, a projected sinusoidal embedding of `t`
//! and, when enabled, the projected output of the active speaker encoder.
//! In dual mode the control value selects which encoder runs; the other one
//! is never evaluated.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use bgflow_core::flowmatch::ControlSignal;
use bgflow_core::seed::stream_rng;
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{
    add_positions, check_finite, sc, segments, sinusoid, Embedding, Grads, Linear, ParamStore, Scalar, Transformer,
    TransformerCache,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    None,
    Single,
    Dual,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::None => "none",
            EncoderMode::Single => "single",
            EncoderMode::Dual => "dual",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EncoderMode::None),
            "single" => Ok(EncoderMode::Single),
            "dual" => Ok(EncoderMode::Dual),
            _ => Err(Error::InvalidArgument(format!(
                "encoder mode must be none, single or dual, got {s:?}"
            ))),
        }
    }
}

/// Training objective: plain masked denoising or the controllable dual-target loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MSD")]
    Msd,
    #[serde(rename = "CMSP")]
    Cmsp,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Msd => "MSD",
            Strategy::Cmsp => "CMSP",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MSD" => Ok(Strategy::Msd),
            "CMSP" => Ok(Strategy::Cmsp),
            _ => Err(Error::InvalidArgument(format!("strategy must be MSD or CMSP, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticModelConfig {
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub backbone_dim: usize,
    pub spk_encoder_layers: usize,
    pub spk_encoder_heads: usize,
    /// Must equal `n_mels`: the encoders read raw context frames.
    pub spk_encoder_dim: usize,
    pub encoder_mode: EncoderMode,
    pub strategy: Strategy,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
}

impl Default for AcousticModelConfig {
    fn default() -> Self {
        Self {
            backbone_layers: 4,
            backbone_heads: 16,
            backbone_dim: 1024,
            spk_encoder_layers: 2,
            spk_encoder_heads: 2,
            spk_encoder_dim: 80,
            encoder_mode: EncoderMode::Dual,
            strategy: Strategy::Cmsp,
            n_mels: 80,
            vocab_size: 37,
            token_dim: 64,
        }
    }
}

impl AcousticModelConfig {
    /// Desk-scale backbone (2 layers, 4 heads, width 256); encoders unchanged.
    pub fn desk() -> Self {
        Self {
            backbone_layers: 2,
            backbone_heads: 4,
            backbone_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("backbone_layers", self.backbone_layers),
            ("backbone_heads", self.backbone_heads),
            ("backbone_dim", self.backbone_dim),
            ("spk_encoder_layers", self.spk_encoder_layers),
            ("spk_encoder_heads", self.spk_encoder_heads),
            ("spk_encoder_dim", self.spk_encoder_dim),
            ("n_mels", self.n_mels),
            ("vocab_size", self.vocab_size),
            ("token_dim", self.token_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.backbone_dim.is_multiple_of(self.backbone_heads) {
            return bad(format!(
                "backbone_dim {} is not divisible by backbone_heads {}",
                self.backbone_dim, self.backbone_heads
            ));
        }
        if !self.spk_encoder_dim.is_multiple_of(self.spk_encoder_heads) {
            return bad(format!(
                "spk_encoder_dim {} is not divisible by spk_encoder_heads {}",
                self.spk_encoder_dim, self.spk_encoder_heads
            ));
        }
        if self.spk_encoder_dim != self.n_mels {
            return bad(format!(
                "spk_encoder_dim ({}) must equal n_mels ({})",
                self.spk_encoder_dim, self.n_mels
            ));
        }
        if self.encoder_mode == EncoderMode::Dual && self.strategy == Strategy::Msd {
            return bad("dual encoders need a control signal; combine them with CMSP, not MSD".into());
        }
        Ok(())
    }

    pub fn uses_control(&self) -> bool {
        self.strategy == Strategy::Cmsp
    }

    fn n_branches(&self) -> usize {
        match self.encoder_mode {
            EncoderMode::None => 0,
            EncoderMode::Single => 1,
            EncoderMode::Dual => 2,
        }
    }

    fn input_dim(&self) -> usize {
        2 * self.n_mels + self.token_dim + 1
    }
}

/// One sequence for the vector-field estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticInput<S> {
    /// Flow state, `T × n_mels`.
    pub w: Array2<S>,
    /// Visible context, `T × n_mels`.
    pub x_ctx: Array2<S>,
    /// Token id per frame; `None` is the null text condition.
    pub frame_tokens: Option<Vec<u32>>,
    pub t: f64,
    pub control: Option<ControlSignal>,
}

impl<S: Scalar> AcousticInput<S> {
    pub fn n_frames(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone)]
struct SpeakerEncoder {
    body: Transformer,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct AcousticArch {
    embed: Embedding,
    in_proj: Linear,
    time_proj: Linear,
    encoders: Vec<SpeakerEncoder>,
    backbone: Transformer,
    out_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct AcousticModel<S> {
    cfg: AcousticModelConfig,
    arch: AcousticArch,
    params: ParamStore<S>,
}

#[derive(Debug, Clone)]
struct EncoderCache<S> {
    branch: usize,
    rows: Vec<usize>,
    segs: Vec<Range<usize>>,
    body_out: Array2<S>,
    body: TransformerCache<S>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AcousticCache<S> {
    segs: Vec<Range<usize>>,
    tokens: Vec<Option<Vec<u32>>>,
    x_in: Array2<S>,
    time_feats: Array2<S>,
    encoders: Vec<EncoderCache<S>>,
    backbone: TransformerCache<S>,
    backbone_out: Array2<S>,
}

const TIME_SCALE: f64 = 1000.0;

impl<S: Scalar> AcousticModel<S> {
    pub fn new(cfg: AcousticModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0x41c0);
        let mut ps = ParamStore::new();
        let d = cfg.backbone_dim;
        let embed = Embedding::new(&mut ps, "embed", cfg.vocab_size, cfg.token_dim, &mut rng);
        let in_proj = Linear::new(&mut ps, "in_proj", cfg.input_dim(), d, &mut rng);
        let time_proj = Linear::new(&mut ps, "time_proj", d, d, &mut rng);
        let encoders = (0..cfg.n_branches())
            .map(|k| SpeakerEncoder {
                body: Transformer::new(
                    &mut ps,
                    &format!("spk_enc{k}"),
                    cfg.spk_encoder_layers,
                    cfg.spk_encoder_dim,
                    cfg.spk_encoder_heads,
                    &mut rng,
                ),
                proj: Linear::new(&mut ps, &format!("spk_enc{k}.proj"), cfg.spk_encoder_dim, d, &mut rng),
            })
            .collect();
        let backbone = Transformer::new(&mut ps, "backbone", cfg.backbone_layers, d, cfg.backbone_heads, &mut rng);
        let out_proj = Linear::new(&mut ps, "out_proj", d, cfg.n_mels, &mut rng);
        Ok(Self {
            cfg,
            arch: AcousticArch {
                embed,
                in_proj,
                time_proj,
                encoders,
                backbone,
                out_proj,
            },
            params: ps,
        })
    }

    /// Rebuild the architecture for `cfg` and install `params`, which must
    /// match it name for name and shape for shape.
    pub fn from_params(cfg: AcousticModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        check_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &AcousticModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> AcousticModel<T> {
        AcousticModel {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Names of every parameter belonging to speaker-encoder branch `k`.
    pub fn encoder_param_names(&self, k: usize) -> Vec<String> {
        let prefix = format!("spk_enc{k}.");
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with(&prefix))
            .cloned()
            .collect()
    }

    /// Which encoder branch serves an input, if any.
    pub fn branch_for(&self, control: Option<ControlSignal>) -> Result<Option<usize>> {
        Ok(match self.cfg.encoder_mode {
            EncoderMode::None => None,
            EncoderMode::Single => Some(0),
            EncoderMode::Dual => match control {
                Some(ControlSignal::Removal) => Some(0),
                Some(ControlSignal::Preservation) => Some(1),
                None => {
                    return Err(Error::InvalidArgument(
                        "dual-encoder model needs a control signal".into(),
                    ))
                }
            },
        })
    }

    fn check_input(&self, x: &AcousticInput<S>) -> Result<()> {
        let m = self.cfg.n_mels;
        let t = x.w.nrows();
        if t == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if x.w.ncols() != m || x.x_ctx.dim() != (t, m) {
            return Err(Error::Shape(format!(
                "w {:?} and x_ctx {:?} must both be T x {m}",
                x.w.dim(),
                x.x_ctx.dim()
            )));
        }
        if let Some(tok) = &x.frame_tokens {
            if tok.len() != t {
                return Err(Error::Shape(format!("{} frame tokens for {t} frames", tok.len())));
            }
            if let Some(bad) = tok.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(Error::InvalidArgument(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
        }
        if !(0.0..=1.0).contains(&x.t) {
            return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {}", x.t)));
        }
        if x.control.is_some() && !self.cfg.uses_control() {
            return Err(Error::InvalidArgument("MSD models take no control signal".into()));
        }
        if x.control.is_none() && self.cfg.uses_control() {
            return Err(Error::InvalidArgument("CMSP models need a control signal".into()));
        }
        Ok(())
    }

    /// Run a batch of sequences; returns the stacked `ΣT × n_mels` field.
    pub fn forward_batch(&self, batch: &[AcousticInput<S>]) -> Result<(Array2<S>, AcousticCache<S>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let cfg = &self.cfg;
        let ps = &self.params;
        let a = &self.arch;
        let (m, dt, d) = (cfg.n_mels, cfg.token_dim, cfg.backbone_dim);
        let segs = segments(batch.iter().map(|x| x.n_frames()));
        let n = segs.last().map_or(0, |r| r.end);

        let mut x_in = Array2::<S>::zeros((n, cfg.input_dim()));
        for (x, seg) in batch.iter().zip(&segs) {
            let mut rows = x_in.slice_mut(s![seg.clone(), ..]);
            rows.slice_mut(s![.., 0..m]).assign(&x.w);
            rows.slice_mut(s![.., m..2 * m]).assign(&x.x_ctx);
            if let Some(tok) = &x.frame_tokens {
                rows.slice_mut(s![.., 2 * m..2 * m + dt]).assign(&a.embed.forward(ps, tok));
            }
            let c = x.control.map_or(0.0, |c| c.value() as f64);
            rows.slice_mut(s![.., 2 * m + dt]).fill(sc(c));
        }
        let mut h = a.in_proj.forward(ps, x_in.view());
        add_positions(&mut h, &segs);

        let mut time_feats = Array2::<S>::zeros((batch.len(), d));
        for (i, x) in batch.iter().enumerate() {
            time_feats.row_mut(i).assign(&sinusoid::<S>(x.t * TIME_SCALE, d));
        }
        let time_emb = a.time_proj.forward(ps, time_feats.view());
        for (i, seg) in segs.iter().enumerate() {
            let mut rows = h.slice_mut(s![seg.clone(), ..]);
            rows += &time_emb.row(i);
        }

        let mut encoders = Vec::new();
        for k in 0..a.encoders.len() {
            let members: Vec<usize> = (0..batch.len())
                .filter(|&i| self.branch_for(batch[i].control).ok().flatten() == Some(k))
                .collect();
            if members.is_empty() {
                continue;
            }
            let rows: Vec<usize> = members.iter().flat_map(|&i| segs[i].clone()).collect();
            let local = segments(members.iter().map(|&i| segs[i].len()));
            let mut enc_in = Array2::<S>::zeros((rows.len(), m));
            let mut r = 0;
            for &i in &members {
                let len = segs[i].len();
                enc_in.slice_mut(s![r..r + len, ..]).assign(&batch[i].x_ctx);
                r += len;
            }
            add_positions(&mut enc_in, &local);
            let enc = &a.encoders[k];
            let (body_out, body) = enc.body.forward(ps, enc_in, &local);
            let contrib = enc.proj.forward(ps, body_out.view());
            for (src, &dst) in rows.iter().enumerate() {
                let mut row = h.row_mut(dst);
                row += &contrib.row(src);
            }
            encoders.push(EncoderCache {
                branch: k,
                rows,
                segs: local,
                body_out,
                body,
            });
        }

        let (backbone_out, backbone) = a.backbone.forward(ps, h, &segs);
        let out = a.out_proj.forward(ps, backbone_out.view());
        check_finite(&out, "acoustic model output")?;
        Ok((
            out,
            AcousticCache {
                segs,
                tokens: batch.iter().map(|x| x.frame_tokens.clone()).collect(),
                x_in,
                time_feats,
                encoders,
                backbone,
                backbone_out,
            },
        ))
    }

    /// Single-sequence convenience wrapper.
    pub fn forward(&self, input: &AcousticInput<S>) -> Result<Array2<S>> {
        Ok(self.forward_batch(std::slice::from_ref(input))?.0)
    }

    /// Parameter gradients for upstream gradient `d_out` (`ΣT × n_mels`).
    pub fn backward(&self, cache: &AcousticCache<S>, d_out: &Array2<S>) -> Grads<S> {
        let ps = &self.params;
        let a = &self.arch;
        let (m, dt) = (self.cfg.n_mels, self.cfg.token_dim);
        let mut g = ps.zeros_like();
        let dy = a.out_proj.backward(ps, cache.backbone_out.view(), d_out.view(), &mut g);
        let dh = a.backbone.backward(ps, &cache.backbone, &cache.segs, dy.view(), &mut g);

        for ec in &cache.encoders {
            let enc = &a.encoders[ec.branch];
            let d_contrib = dh.select(Axis(0), &ec.rows);
            let d_body = enc.proj.backward(ps, ec.body_out.view(), d_contrib.view(), &mut g);
            enc.body.backward(ps, &ec.body, &ec.segs, d_body.view(), &mut g);
        }

        let mut d_time = Array2::<S>::zeros(cache.time_feats.raw_dim());
        for (i, seg) in cache.segs.iter().enumerate() {
            d_time
                .row_mut(i)
                .assign(&dh.slice(s![seg.clone(), ..]).sum_axis(Axis(0)));
        }
        a.time_proj.backward_params(cache.time_feats.view(), d_time.view(), &mut g);

        a.in_proj.backward_params(cache.x_in.view(), dh.view(), &mut g);
        let w_z = ps.get(a.in_proj.w).slice(s![2 * m..2 * m + dt, ..]).to_owned();
        for (seg, tok) in cache.segs.iter().zip(&cache.tokens) {
            if let Some(tok) = tok {
                let dz = dh.slice(s![seg.clone(), ..]).dot(&w_z.t());
                a.embed.backward(tok, dz.view(), &mut g);
            }
        }
        g
    }

    /// What the active speaker encoder adds to the backbone input of one
    /// sequence (`T × backbone_dim`); zeros when no encoder is active.
    pub fn speaker_contribution(&self, input: &AcousticInput<S>) -> Result<Array2<S>> {
        self.check_input(input)?;
        let t = input.n_frames();
        let Some(k) = self.branch_for(input.control)? else {
            return Ok(Array2::zeros((t, self.cfg.backbone_dim)));
        };
        let enc = &self.arch.encoders[k];
        let segs = [0..t];
        let mut x = input.x_ctx.clone();
        add_positions(&mut x, &segs);
        let (body_out, _) = enc.body.forward(&self.params, x, &segs);
        Ok(enc.proj.forward(&self.params, body_out.view()))
    }
}

pub(crate) fn check_layout<S: Scalar, T: Scalar>(expected: &ParamStore<S>, got: &ParamStore<T>) -> Result<()> {
    if expected.names() != got.names() {
        return Err(Error::Checkpoint(format!(
            "parameter names do not match the configured architecture ({} expected, {} found)",
            expected.len(),
            got.len()
        )));
    }
    for ((name, e), g) in expected.names().iter().zip(expected.values()).zip(got.values()) {
        if e.dim() != g.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, architecture expects {:?}",
                g.dim(),
                e.dim()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny(mode: EncoderMode, strategy: Strategy) -> AcousticModelConfig {
        AcousticModelConfig {
            backbone_layers: 2,
            backbone_heads: 2,
            backbone_dim: 16,
            spk_encoder_layers: 2,
            spk_encoder_heads: 2,
            spk_encoder_dim: 8,
            encoder_mode: mode,
            strategy,
            n_mels: 8,
            vocab_size: 5,
            token_dim: 4,
        }
    }

    fn input(seed: u64, t: usize, m: usize, control: Option<ControlSignal>) -> AcousticInput<f64> {
        let mut rng = stream_rng(seed, 0);
        AcousticInput {
            w: Array2::from_shape_simple_fn((t, m), || rng.random_range(-1.0..1.0)),
            x_ctx: Array2::from_shape_simple_fn((t, m), || rng.random_range(-1.0..1.0)),
            frame_tokens: Some((0..t).map(|i| (i % 5) as u32).collect()),
            t: 0.3,
            control,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = AcousticModelConfig {
            n_mels: 80,
            spk_encoder_dim: 80,
            ..tiny(EncoderMode::Dual, Strategy::Cmsp)
        };
        let model = AcousticModel::<f64>::new(cfg, 1).unwrap();
        let out = model
            .forward(&input(2, 17, 80, Some(ControlSignal::Removal)))
            .unwrap();
        assert_eq!(out.dim(), (17, 80));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dual_msd_is_rejected() {
        let cfg = tiny(EncoderMode::Dual, Strategy::Msd);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut bad = tiny(EncoderMode::Single, Strategy::Cmsp);
        bad.backbone_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn control_presence_follows_strategy() {
        let msd = AcousticModel::<f64>::new(tiny(EncoderMode::Single, Strategy::Msd), 1).unwrap();
        assert!(msd.forward(&input(1, 4, 8, Some(ControlSignal::Removal))).is_err());
        assert!(msd.forward(&input(1, 4, 8, None)).is_ok());
        let cmsp = AcousticModel::<f64>::new(tiny(EncoderMode::None, Strategy::Cmsp), 1).unwrap();
        assert!(cmsp.forward(&input(1, 4, 8, None)).is_err());
    }

    #[test]
    fn no_encoder_params_in_none_mode() {
        let model = AcousticModel::<f64>::new(tiny(EncoderMode::None, Strategy::Cmsp), 1).unwrap();
        assert!(model.encoder_param_names(0).is_empty());
        let dual = AcousticModel::<f64>::new(tiny(EncoderMode::Dual, Strategy::Cmsp), 1).unwrap();
        assert_eq!(dual.encoder_param_names(0).len(), dual.encoder_param_names(1).len());
    }

    #[test]
    fn batched_equals_individual() {
        let model = AcousticModel::<f64>::new(tiny(EncoderMode::Dual, Strategy::Cmsp), 3).unwrap();
        let a = input(1, 5, 8, Some(ControlSignal::Removal));
        let b = input(2, 7, 8, Some(ControlSignal::Preservation));
        let (both, _) = model.forward_batch(&[a.clone(), b.clone()]).unwrap();
        let ya = model.forward(&a).unwrap();
        let yb = model.forward(&b).unwrap();
        assert!((&both.slice(s![0..5, ..]) - &ya).iter().all(|d| d.abs() < 1e-12));
        assert!((&both.slice(s![5..12, ..]) - &yb).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn null_tokens_give_zero_embedding_gradient() {
        let model = AcousticModel::<f64>::new(tiny(EncoderMode::Single, Strategy::Cmsp), 3).unwrap();
        let mut x = input(1, 5, 8, Some(ControlSignal::Removal));
        x.frame_tokens = None;
        let (y, cache) = model.forward_batch(std::slice::from_ref(&x)).unwrap();
        let g = model.backward(&cache, &Array2::ones(y.raw_dim()));
        let id = model.params().find("embed.table").unwrap();
        assert!(g.get(id).iter().all(|v| *v == 0.0));
    }
}
