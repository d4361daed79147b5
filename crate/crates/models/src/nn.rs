//! Minimal transformer toolkit with hand-written backward passes.
//!
//! Parameters live in a [`ParamStore`] addressed by [`ParamId`]; layers only
//! hold ids, so one architecture can be evaluated in `f32` for training and
//! in `f64` for gradient checks. Sequences of different lengths are stacked
//! row-wise into one matrix and attention runs per segment, which keeps
//! every dense layer a single matrix product without padding.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::NumCast;
use rand::Rng;

pub trait Scalar: NdFloat + Default {}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn sc<S: Scalar>(x: f64) -> S {
    <S as NumCast>::from(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, all stored as matrices (biases are `1 × n`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Array2<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Panics on a duplicate name; names are fixed by the architecture code.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<S>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<S> {
        Grads(self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| <T as NumCast>::from(x).expect("castable")))
                .collect(),
        }
    }
}

/// Gradient buffers with the same layout as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S>(pub Vec<Array2<S>>);

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.0[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| {
                let f: f64 = NumCast::from(*v).unwrap();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: S) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * k);
        }
    }
}

fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || sc(rng.random_range(-limit..=limit)))
}

/// `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, d_in, d_out, limit));
        let b = ps.add(format!("{name}.b"), Array2::zeros((1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(ps.get(self.w));
        y += ps.get(self.b);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: ArrayView2<S>,
        dy: ArrayView2<S>,
        g: &mut Grads<S>,
    ) -> Array2<S> {
        self.backward_params(x, dy, g);
        dy.dot(&ps.get(self.w).t())
    }

    /// Parameter gradients only, for layers whose input is data.
    pub fn backward_params<S: Scalar>(&self, x: ArrayView2<S>, dy: ArrayView2<S>, g: &mut Grads<S>) {
        general_mat_mul(S::one(), &x.t(), &dy, S::one(), g.get_mut(self.w));
        let db = dy.sum_axis(Axis(0));
        *g.get_mut(self.b) += &db.insert_axis(Axis(0));
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LnCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Array2::ones((1, dim)));
        let bias = ps.add(format!("{name}.bias"), Array2::zeros((1, dim)));
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: ArrayView2<S>) -> (Array2<S>, LnCache<S>) {
        let n: S = sc(x.ncols() as f64);
        let eps: S = sc(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).fold(S::zero(), |a, b| a + b) / n;
            *is = S::one() / (var + eps).sqrt();
            let k = *is;
            row.mapv_inplace(|v| v * k);
        }
        let mut y = &xhat * ps.get(self.gain);
        y += ps.get(self.bias);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &LnCache<S>,
        dy: ArrayView2<S>,
        g: &mut Grads<S>,
    ) -> Array2<S> {
        let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
        *g.get_mut(self.gain) += &dgain.insert_axis(Axis(0));
        *g.get_mut(self.bias) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let n: S = sc(dy.ncols() as f64);
        let mut dx = &dy * ps.get(self.gain);
        for ((mut row, xh), is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh).fold(S::zero(), |a, (d, x)| a + *d * *x) / n;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|d, &x| *d = *is * (*d - mean_d - x * mean_dx));
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let k: S = sc(GELU_K);
    let c: S = sc(GELU_C);
    let half: S = sc(0.5);
    half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let k: S = sc(GELU_K);
    let c: S = sc(GELU_C);
    let half: S = sc(0.5);
    let three: S = sc(3.0);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * k * (S::one() + three * c * x * x)
}

/// Position-wise feed-forward with 4× expansion.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FfnCache<S> {
    x: Array2<S>,
    pre: Array2<S>,
    act: Array2<S>,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, 4 * dim, rng),
            down: Linear::new(ps, &format!("{name}.down"), 4 * dim, dim, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: ArrayView2<S>) -> (Array2<S>, FfnCache<S>) {
        let pre = self.up.forward(ps, x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(ps, act.view());
        (
            y,
            FfnCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        c: &FfnCache<S>,
        dy: ArrayView2<S>,
        g: &mut Grads<S>,
    ) -> Array2<S> {
        let mut dact = self.down.backward(ps, c.act.view(), dy, g);
        Zip::from(&mut dact).and(&c.pre).for_each(|d, &p| *d *= gelu_grad(p));
        self.up.backward(ps, c.x.view(), dact.view(), g)
    }
}

/// Multi-head self-attention within each row segment.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<S> {
    x: Array2<S>,
    qkv: Array2<S>,
    probs: Vec<Array2<S>>,
    ctx: Array2<S>,
}

fn softmax_rows<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Attention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn head_cols(&self, which: usize, h: usize) -> Range<usize> {
        let dh = self.dim / self.heads;
        let start = which * self.dim + h * dh;
        start..start + dh
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: ArrayView2<S>,
        segs: &[Range<usize>],
    ) -> (Array2<S>, AttnCache<S>) {
        let qkv = self.qkv.forward(ps, x);
        let scale: S = sc(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let mut ctx = Array2::zeros((x.nrows(), self.dim));
        let mut probs = Vec::with_capacity(segs.len() * self.heads);
        for seg in segs {
            for h in 0..self.heads {
                let q = qkv.slice(s![seg.clone(), self.head_cols(0, h)]);
                let k = qkv.slice(s![seg.clone(), self.head_cols(1, h)]);
                let v = qkv.slice(s![seg.clone(), self.head_cols(2, h)]);
                let mut p = q.dot(&k.t());
                p.mapv_inplace(|e| e * scale);
                softmax_rows(&mut p);
                ctx.slice_mut(s![seg.clone(), self.head_cols(0, h)]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.out.forward(ps, ctx.view());
        (
            y,
            AttnCache {
                x: x.to_owned(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        c: &AttnCache<S>,
        segs: &[Range<usize>],
        dy: ArrayView2<S>,
        g: &mut Grads<S>,
    ) -> Array2<S> {
        let dctx = self.out.backward(ps, c.ctx.view(), dy, g);
        let scale: S = sc(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let mut dqkv = Array2::zeros(c.qkv.raw_dim());
        let mut idx = 0;
        for seg in segs {
            for h in 0..self.heads {
                let p = &c.probs[idx];
                idx += 1;
                let q = c.qkv.slice(s![seg.clone(), self.head_cols(0, h)]);
                let k = c.qkv.slice(s![seg.clone(), self.head_cols(1, h)]);
                let v = c.qkv.slice(s![seg.clone(), self.head_cols(2, h)]);
                let d_o = dctx.slice(s![seg.clone(), self.head_cols(0, h)]);
                let dv = p.t().dot(&d_o);
                let mut ds = d_o.dot(&v.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.iter().zip(prow).fold(S::zero(), |a, (d, p)| a + *d * *p);
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|d, &p| *d = p * (*d - dot) * scale);
                }
                dqkv.slice_mut(s![seg.clone(), self.head_cols(0, h)]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![seg.clone(), self.head_cols(1, h)]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![seg.clone(), self.head_cols(2, h)]).assign(&dv);
            }
        }
        self.qkv.backward(ps, c.x.view(), dqkv.view(), g)
    }
}

/// Pre-LayerNorm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache<S> {
    ln1: LnCache<S>,
    attn: AttnCache<S>,
    ln2: LnCache<S>,
    ffn: FfnCache<S>,
}

impl Block {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, rng),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: ArrayView2<S>,
        segs: &[Range<usize>],
    ) -> (Array2<S>, BlockCache<S>) {
        let (a_in, ln1) = self.ln1.forward(ps, x);
        let (a, attn) = self.attn.forward(ps, a_in.view(), segs);
        let h = &x + &a;
        let (f_in, ln2) = self.ln2.forward(ps, h.view());
        let (f, ffn) = self.ffn.forward(ps, f_in.view());
        (h + f, BlockCache { ln1, attn, ln2, ffn })
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        c: &BlockCache<S>,
        segs: &[Range<usize>],
        dy: ArrayView2<S>,
        g: &mut Grads<S>,
    ) -> Array2<S> {
        let df_in = self.ffn.backward(ps, &c.ffn, dy, g);
        let dh = &dy + &self.ln2.backward(ps, &c.ln2, df_in.view(), g);
        let da_in = self.attn.backward(ps, &c.attn, segs, dh.view(), g);
        dh + self.ln1.backward(ps, &c.ln1, da_in.view(), g)
    }
}

/// Stack of blocks followed by a final LayerNorm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TransformerCache<S> {
    blocks: Vec<BlockCache<S>>,
    ln: LnCache<S>,
}

impl Transformer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(ps, &format!("{name}.block{i}"), dim, heads, rng))
            .collect();
        Self {
            blocks,
            ln: LayerNorm::new(ps, &format!("{name}.ln_f"), dim),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: Array2<S>,
        segs: &[Range<usize>],
    ) -> (Array2<S>, TransformerCache<S>) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(ps, h.view(), segs);
            caches.push(c);
            h = y;
        }
        let (y, ln) = self.ln.forward(ps, h.view());
        (y, TransformerCache { blocks: caches, ln })
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        c: &TransformerCache<S>,
        segs: &[Range<usize>],
        dy: ArrayView2<S>,
        g: &mut Grads<S>,
    ) -> Array2<S> {
        let mut d = self.ln.backward(ps, &c.ln, dy, g);
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            d = b.backward(ps, bc, segs, d.view(), g);
        }
        d
    }
}

/// Token embedding table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = ps.add(format!("{name}.table"), uniform(rng, vocab, dim, 1.0 / (dim as f64).sqrt()));
        Self { table, vocab, dim }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ids: &[u32]) -> Array2<S> {
        let t = ps.get(self.table);
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id as usize));
        }
        out
    }

    pub fn backward<S: Scalar>(&self, ids: &[u32], dz: ArrayView2<S>, g: &mut Grads<S>) {
        let gt = g.get_mut(self.table);
        for (row, &id) in dz.rows().into_iter().zip(ids) {
            let mut target = gt.row_mut(id as usize);
            target += &row;
        }
    }
}

/// Fixed sinusoidal encoding of `value` into `dim` channels.
pub fn sinusoid<S: Scalar>(value: f64, dim: usize) -> Array1<S> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = sc(f64::sin(value * freq));
        out[2 * i + 1] = sc(f64::cos(value * freq));
    }
    out
}

/// Add a sinusoidal position encoding restarting at every segment.
pub fn add_positions<S: Scalar>(x: &mut Array2<S>, segs: &[Range<usize>]) {
    let dim = x.ncols();
    let longest = segs.iter().map(|s| s.len()).max().unwrap_or(0);
    let table: Vec<Array1<S>> = (0..longest).map(|p| sinusoid(p as f64, dim)).collect();
    for seg in segs {
        for (p, r) in seg.clone().enumerate() {
            let mut row = x.row_mut(r);
            row += &table[p];
        }
    }
}

/// Contiguous row ranges for sequences of the given lengths.
pub fn segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|l| {
            let r = start..start + l;
            start += l;
            r
        })
        .collect()
}

pub(crate) fn check_finite<S: Scalar>(x: &Array2<S>, what: &str) -> crate::Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bgflow_core::seed::stream_rng;

    fn numeric<F: Fn(&ParamStore<f64>) -> f64>(ps: &ParamStore<f64>, id: ParamId, idx: (usize, usize), f: F) -> f64 {
        let eps = 1e-5;
        let mut p = ps.clone();
        p.get_mut(id)[idx] += eps;
        let up = f(&p);
        p.get_mut(id)[idx] -= 2.0 * eps;
        let down = f(&p);
        (up - down) / (2.0 * eps)
    }

    fn random_input(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0);
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_gradient_is_exact() {
        let mut rng = stream_rng(1, 0);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, &mut rng);
        let x = random_input(2, 4, 3);
        let r = random_input(3, 4, 2);
        let loss = |p: &ParamStore<f64>| (lin.forward(p, x.view()) * &r).sum();
        let mut g = ps.zeros_like();
        let dx = lin.backward(&ps, x.view(), r.view(), &mut g);
        for (id, idx) in [(lin.w, (1, 1)), (lin.w, (2, 0)), (lin.b, (0, 1))] {
            let n = numeric(&ps, id, idx, loss);
            let a = g.get(id)[idx];
            assert!((a - n).abs() / (a.abs() + 1e-8) < 1e-5);
        }
        // input gradient
        let w = ps.get(lin.w);
        assert!((dx[[0, 0]] - (r[[0, 0]] * w[[0, 0]] + r[[0, 1]] * w[[0, 1]])).abs() < 1e-12);
    }

    #[test]
    fn block_gradients_match_central_differences() {
        let mut rng = stream_rng(5, 0);
        let mut ps = ParamStore::<f64>::new();
        let block = Block::new(&mut ps, "b", 8, 2, &mut rng);
        let x = random_input(6, 7, 8);
        let r = random_input(7, 7, 8);
        let segs = segments([3, 4]);
        let loss = |p: &ParamStore<f64>| (block.forward(p, x.view(), &segs).0 * &r).sum();
        let (_, cache) = block.forward(&ps, x.view(), &segs);
        let mut g = ps.zeros_like();
        block.backward(&ps, &cache, &segs, r.view(), &mut g);
        let mut worst = 0.0f64;
        for i in 0..ps.len() {
            let id = ParamId(i);
            let shape = ps.get(id).dim();
            for k in 0..3 {
                let idx = ((k * 7) % shape.0, (k * 5 + 1) % shape.1);
                let n = numeric(&ps, id, idx, loss);
                let a = g.get(id)[idx];
                worst = worst.max((a - n).abs() / (a.abs() + 1e-8));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn attention_does_not_cross_segments() {
        let mut rng = stream_rng(8, 0);
        let mut ps = ParamStore::<f64>::new();
        let attn = Attention::new(&mut ps, "a", 4, 2, &mut rng);
        let x = random_input(9, 5, 4);
        let segs = segments([2, 3]);
        let (y, _) = attn.forward(&ps, x.view(), &segs);
        let mut x2 = x.clone();
        x2.row_mut(4).fill(7.0);
        let (y2, _) = attn.forward(&ps, x2.view(), &segs);
        assert_eq!(y.slice(s![0..2, ..]), y2.slice(s![0..2, ..]));
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let n = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - n).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        let x = random_input(1, 3, 6) * 10.0 + 4.0;
        let (y, _) = ln.forward(&ps, x.view());
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn segments_tile_rows() {
        assert_eq!(segments([2, 0, 3]), vec![0..2, 2..2, 2..5]);
    }
}
