//! Conditional flow matching on the optimal-transport path: training targets,
//! masked losses (plain, controllable dual-target and denoising), guidance
//! dropout and combination, and fixed-step ODE integration.

use std::fmt;

use ndarray::{Array, Array2, ArrayView2, Dimension, ScalarOperand, Zip};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskSpec, CONTEXT_FILL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Midpoint,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            _ => Err(Error::InvalidArgument(format!("solver must be euler or midpoint, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub p_uncond: f64,
    pub alpha: f64,
    pub n_ode_steps: usize,
    pub solver: Solver,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-5,
            p_uncond: 0.2,
            alpha: 0.7,
            n_ode_steps: 32,
            solver: Solver::Midpoint,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "flow.sigma_min must be in [0, 1), got {}",
                self.sigma_min
            )));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "flow.p_uncond must be in [0, 1), got {}",
                self.p_uncond
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "flow.alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.n_ode_steps < 1 {
            return Err(Error::Config("flow.n_ode_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Binary task selector. Encoded as a per-frame channel of all zeros
/// (removal, `c0`) or all ones (preservation, `c1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlSignal {
    Removal,
    Preservation,
}

impl ControlSignal {
    pub fn value(self) -> f32 {
        match self {
            ControlSignal::Removal => 0.0,
            ControlSignal::Preservation => 1.0,
        }
    }

    pub fn encode(self, n_frames: usize) -> Vec<f32> {
        vec![self.value(); n_frames]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControlSignal::Removal => "removal",
            ControlSignal::Preservation => "preservation",
        }
    }
}

impl fmt::Display for ControlSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControlSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "removal" | "c0" => Ok(ControlSignal::Removal),
            "preservation" | "c1" => Ok(ControlSignal::Preservation),
            _ => Err(Error::InvalidArgument(format!(
                "task must be removal or preservation, got {s:?}"
            ))),
        }
    }
}

fn same_shape<A, B, D: Dimension>(a: &Array<A, D>, b: &Array<B, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Point on the OT path and its (time-independent) velocity:
/// `w = (1 − (1 − σ)t)·x0 + t·x1`, `u = x1 − (1 − σ)·x0`.
pub fn ot_path<A, D>(
    x0: &Array<A, D>,
    x1: &Array<A, D>,
    t: A,
    sigma_min: A,
) -> Result<(Array<A, D>, Array<A, D>)>
where
    A: Float,
    D: Dimension,
{
    same_shape(x0, x1)?;
    if !(t >= A::zero() && t <= A::one()) {
        return Err(Error::InvalidArgument("t must lie in [0, 1]".into()));
    }
    let keep = A::one() - sigma_min;
    let a = A::one() - keep * t;
    let w = Zip::from(x0).and(x1).map_collect(|&z, &x| a * z + t * x);
    let u = Zip::from(x0).and(x1).map_collect(|&z, &x| x - keep * z);
    Ok((w, u))
}

/// Regression target `x̃ − (1 − σ)·x0`.
pub fn flow_target(x_tilde: ArrayView2<f32>, x0: ArrayView2<f32>, sigma_min: f64) -> Result<Array2<f32>> {
    if x_tilde.dim() != x0.dim() {
        return Err(Error::shape(x_tilde.dim(), x0.dim()));
    }
    let keep = (1.0 - sigma_min) as f32;
    Ok(Zip::from(&x_tilde).and(&x0).map_collect(|&x, &z| x - keep * z))
}

/// Mean squared error over masked frames (all bins), plus its gradient with
/// respect to `pred`.
pub fn masked_mse_with_grad(
    pred: ArrayView2<f32>,
    target: ArrayView2<f32>,
    mask: &MaskSpec,
) -> Result<(f64, Array2<f32>)> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(pred.dim(), target.dim()));
    }
    if pred.nrows() != mask.len() {
        return Err(Error::shape(pred.nrows(), mask.len()));
    }
    let n_masked = mask.n_masked();
    if n_masked == 0 {
        return Err(Error::DegenerateBatch("mask selects no frames".into()));
    }
    let denom = (n_masked * pred.ncols()) as f64;
    let mut grad = Array2::<f32>::zeros(pred.dim());
    let mut sum = 0.0f64;
    for (i, &m) in mask.flags().iter().enumerate() {
        if !m {
            continue;
        }
        for j in 0..pred.ncols() {
            let r = (pred[[i, j]] - target[[i, j]]) as f64;
            sum += r * r;
            grad[[i, j]] = (2.0 * r / denom) as f32;
        }
    }
    Ok((sum / denom, grad))
}

/// Flow-matching loss restricted to masked frames.
pub fn voicebox_loss(
    pred: ArrayView2<f32>,
    x_tilde: ArrayView2<f32>,
    x0: ArrayView2<f32>,
    mask: &MaskSpec,
    sigma_min: f64,
) -> Result<f64> {
    let target = flow_target(x_tilde, x0, sigma_min)?;
    masked_mse_with_grad(pred, target.view(), mask).map(|(l, _)| l)
}

/// The two terms of the controllable dual-target loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmspLoss {
    /// Removal term: `c0` prediction against the clean target.
    pub removal: f64,
    /// Preservation term: `c1` prediction against the augmented target.
    pub preservation: f64,
}

impl CmspLoss {
    pub fn total(&self) -> f64 {
        self.removal + self.preservation
    }
}

pub fn cmsp_loss(
    pred_c0: ArrayView2<f32>,
    pred_c1: ArrayView2<f32>,
    x_tilde: ArrayView2<f32>,
    x_tilde_aug: ArrayView2<f32>,
    x0: ArrayView2<f32>,
    mask: &MaskSpec,
    sigma_min: f64,
) -> Result<CmspLoss> {
    Ok(CmspLoss {
        removal: voicebox_loss(pred_c0, x_tilde, x0, mask, sigma_min)?,
        preservation: voicebox_loss(pred_c1, x_tilde_aug, x0, mask, sigma_min)?,
    })
}

/// Masked speech denoising: the prediction, made from augmented context,
/// regresses the clean target only.
pub fn msd_loss(
    pred: ArrayView2<f32>,
    x_tilde: ArrayView2<f32>,
    x0: ArrayView2<f32>,
    mask: &MaskSpec,
    sigma_min: f64,
) -> Result<f64> {
    voicebox_loss(pred, x_tilde, x0, mask, sigma_min)
}

/// Conditioning of one utterance for the vector-field estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub context: Array2<f32>,
    /// Token id of every frame; `None` is the null text condition.
    pub frame_tokens: Option<Vec<u32>>,
    /// `None` for strategies without a task selector.
    pub control: Option<ControlSignal>,
}

impl Conditioning {
    /// Replace context and text with the null condition, keeping the control.
    pub fn drop_to_null(&mut self) {
        self.context.fill(CONTEXT_FILL);
        self.frame_tokens = None;
    }

    pub fn is_null(&self) -> bool {
        self.frame_tokens.is_none() && self.context.iter().all(|&v| v == CONTEXT_FILL)
    }
}

/// Independently, with probability `p_uncond`, replace each item's context
/// and text by the null condition. Returns the number dropped.
pub fn cfg_dropout<R: Rng + ?Sized>(batch: &mut [Conditioning], p_uncond: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..1.0).contains(&p_uncond) {
        return Err(Error::InvalidArgument(format!(
            "p_uncond must be in [0, 1), got {p_uncond}"
        )));
    }
    let mut dropped = 0;
    for item in batch.iter_mut() {
        if p_uncond > 0.0 && rng.random::<f64>() < p_uncond {
            item.drop_to_null();
            dropped += 1;
        }
    }
    Ok(dropped)
}

/// Guided field `(1 + α)·v_cond − α·v_uncond`.
pub fn cfg_combine<A, D>(v_cond: &Array<A, D>, v_uncond: &Array<A, D>, alpha: A) -> Result<Array<A, D>>
where
    A: Float,
    D: Dimension,
{
    same_shape(v_cond, v_uncond)?;
    // written as c + α(c − u) so both identities hold bit-exactly
    Ok(Zip::from(v_cond)
        .and(v_uncond)
        .map_collect(|&c, &u| c + alpha * (c - u)))
}

/// Fixed-step integration of `dx/dt = field(x, t)` from `t = 0` to `t = 1`.
pub fn ode_solve<A, D, F>(mut field: F, x0: &Array<A, D>, n_steps: usize, solver: Solver) -> Result<Array<A, D>>
where
    A: Float + ScalarOperand,
    D: Dimension,
    F: FnMut(&Array<A, D>, A) -> Array<A, D>,
{
    if n_steps < 1 {
        return Err(Error::InvalidArgument("ode_solve needs at least one step".into()));
    }
    let h = A::one() / A::from(n_steps).unwrap();
    let half = A::from(0.5).unwrap();
    let mut x = x0.clone();
    let mut eval = |x: &Array<A, D>, t: A, step: usize| -> Result<Array<A, D>> {
        let v = field(x, t);
        if v.shape() != x.shape() {
            return Err(Error::shape(x.shape(), v.shape()));
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NumericalFailure {
                step,
                message: "vector field returned a non-finite value".into(),
            });
        }
        Ok(v)
    };
    for step in 0..n_steps {
        let t = A::from(step).unwrap() * h;
        match solver {
            Solver::Euler => {
                let v = eval(&x, t, step)?;
                x = x + v * h;
            }
            Solver::Midpoint => {
                let v = eval(&x, t, step)?;
                let mid = &x + &(v * (h * half));
                let vm = eval(&mid, t + h * half, step)?;
                x = x + vm * h;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use ndarray::{array, Array1};

    #[test]
    fn path_endpoints() {
        let x0 = array![[0.5f64, -1.0], [2.0, 3.0]];
        let x1 = array![[1.0f64, 1.0], [-2.0, 0.25]];
        let (w0, _) = ot_path(&x0, &x1, 0.0, 1e-5).unwrap();
        assert_eq!(w0, x0);
        let (w1, _) = ot_path(&x0, &x1, 1.0, 1e-5).unwrap();
        for ((w, a), b) in w1.iter().zip(&x0).zip(&x1) {
            assert!((w - (1e-5 * a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_path_hand_case() {
        let (w, u) = ot_path(&array![0.0f64], &array![2.0f64], 0.5, 0.0).unwrap();
        assert_eq!(w, array![1.0]);
        assert_eq!(u, array![2.0]);
    }

    #[test]
    fn path_rejects_mismatch_and_bad_t() {
        let a = Array1::<f64>::zeros(3);
        let b = Array1::<f64>::zeros(4);
        assert!(matches!(ot_path(&a, &b, 0.5, 0.0), Err(Error::ShapeMismatch { .. })));
        assert!(ot_path(&a, &a, 1.5, 0.0).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let xt = array![[1.0f32, 2.0], [3.0, 4.0]];
        let x0 = array![[0.5f32, -0.5], [0.1, 0.2]];
        let mask = MaskSpec::full(2);
        let pred = flow_target(xt.view(), x0.view(), 1e-5).unwrap();
        assert_eq!(voicebox_loss(pred.view(), xt.view(), x0.view(), &mask, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn scalar_residual_three_gives_nine() {
        let xt = array![[2.0f32]];
        let x0 = array![[0.0f32]];
        let pred = array![[5.0f32]];
        let l = voicebox_loss(pred.view(), xt.view(), x0.view(), &MaskSpec::full(1), 1e-5).unwrap();
        assert_eq!(l, 9.0);
    }

    #[test]
    fn unmasked_frames_do_not_matter() {
        let xt = array![[1.0f32], [2.0], [3.0]];
        let x0 = array![[0.0f32], [0.0], [0.0]];
        let mask = MaskSpec::contiguous(3, 1..2).unwrap();
        let p1 = array![[100.0f32], [2.5], [-7.0]];
        let p2 = array![[-4.0f32], [2.5], [9.0]];
        let l1 = voicebox_loss(p1.view(), xt.view(), x0.view(), &mask, 0.0).unwrap();
        let l2 = voicebox_loss(p2.view(), xt.view(), x0.view(), &mask, 0.0).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l1, 0.25);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let x = array![[1.0f32], [2.0]];
        let mask = MaskSpec::contiguous(2, 0..0).unwrap();
        assert!(matches!(
            voicebox_loss(x.view(), x.view(), x.view(), &mask, 0.0),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn cmsp_hand_case() {
        let zero = array![[0.0f32]];
        let l = cmsp_loss(
            array![[1.0f32]].view(),
            array![[2.0f32]].view(),
            zero.view(),
            zero.view(),
            zero.view(),
            &MaskSpec::full(1),
            0.0,
        )
        .unwrap();
        assert_eq!(l.removal, 1.0);
        assert_eq!(l.preservation, 4.0);
        assert_eq!(l.total(), 5.0);
    }

    #[test]
    fn cmsp_clean_condition_doubles_single_term() {
        let mut rng = stream_rng(0, 0);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0f32..1.0));
        let x0 = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0f32..1.0));
        let pred = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0f32..1.0));
        let mask = MaskSpec::contiguous(5, 1..4).unwrap();
        let single = voicebox_loss(pred.view(), x.view(), x0.view(), &mask, 1e-5).unwrap();
        let both = cmsp_loss(pred.view(), pred.view(), x.view(), x.view(), x0.view(), &mask, 1e-5).unwrap();
        assert_eq!(both.total(), 2.0 * single);
    }

    #[test]
    fn msd_matches_removal_term() {
        let mut rng = stream_rng(1, 0);
        let mut r = || Array2::from_shape_fn((6, 4), |_| rng.random_range(-2.0f32..2.0));
        let (p0, p1, x, xa, x0) = (r(), r(), r(), r(), r());
        let mask = MaskSpec::contiguous(6, 2..6).unwrap();
        let c = cmsp_loss(p0.view(), p1.view(), x.view(), xa.view(), x0.view(), &mask, 1e-5).unwrap();
        let m = msd_loss(p0.view(), x.view(), x0.view(), &mask, 1e-5).unwrap();
        assert_eq!(c.removal, m);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let pred = array![[0.3f32, -0.2], [1.0, 0.5]];
        let target = array![[0.0f32, 0.1], [0.4, 0.4]];
        let mask = MaskSpec::contiguous(2, 1..2).unwrap();
        let (_, g) = masked_mse_with_grad(pred.view(), target.view(), &mask).unwrap();
        let eps = 1e-3f32;
        for i in 0..2 {
            for j in 0..2 {
                let mut p = pred.clone();
                p[[i, j]] += eps;
                let (lp, _) = masked_mse_with_grad(p.view(), target.view(), &mask).unwrap();
                p[[i, j]] -= 2.0 * eps;
                let (lm, _) = masked_mse_with_grad(p.view(), target.view(), &mask).unwrap();
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - g[[i, j]] as f64).abs() < 1e-3);
            }
        }
    }

    fn conditioning(t: usize) -> Conditioning {
        Conditioning {
            context: Array2::from_elem((t, 2), 0.7),
            frame_tokens: Some(vec![3; t]),
            control: Some(ControlSignal::Preservation),
        }
    }

    #[test]
    fn zero_dropout_changes_nothing() {
        let mut batch = vec![conditioning(4); 20];
        let before = batch.clone();
        let mut rng = stream_rng(0, 0);
        assert_eq!(cfg_dropout(&mut batch, 0.0, &mut rng).unwrap(), 0);
        assert_eq!(batch, before);
    }

    #[test]
    fn dropped_items_keep_their_control() {
        let mut batch = vec![conditioning(3); 200];
        let mut rng = stream_rng(2, 0);
        let n = cfg_dropout(&mut batch, 0.5, &mut rng).unwrap();
        assert!(n > 0);
        for item in &batch {
            assert_eq!(item.control, Some(ControlSignal::Preservation));
        }
        assert_eq!(batch.iter().filter(|c| c.is_null()).count(), n);
        assert!(cfg_dropout(&mut batch, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_frequency_is_binomial() {
        let p = 1.0 - 1e-3;
        let n = 10_000;
        let mut batch = vec![conditioning(1); n];
        let mut rng = stream_rng(3, 0);
        let dropped = cfg_dropout(&mut batch, p, &mut rng).unwrap() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((dropped - n as f64 * p).abs() <= 3.0 * sd + 1.0, "dropped {dropped}");
    }

    #[test]
    fn guidance_identities() {
        let c = array![2.0f64, -1.0];
        let u = array![1.0f64, 4.0];
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert!((cfg_combine(&array![2.0f64], &array![1.0], 0.7).unwrap()[0] - 2.7).abs() < 1e-12);
        assert_eq!(cfg_combine(&c, &c, 3.3).unwrap(), c);
        assert!(cfg_combine(&c, &array![1.0f64], 0.5).is_err());
    }

    #[test]
    fn zero_and_constant_fields() {
        let x0 = array![1.0f64, -2.0];
        for solver in [Solver::Euler, Solver::Midpoint] {
            let x = ode_solve(|x, _| Array1::zeros(x.len()), &x0, 7, solver).unwrap();
            assert_eq!(x, x0);
            for n in [1, 3, 16] {
                let x = ode_solve(|_, _| array![0.5, 2.0], &x0, n, solver).unwrap();
                assert!((x[0] - 1.5).abs() < 1e-12 && (x[1] - 0.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_on_linear_field_is_compound_interest() {
        let x0 = array![1.0f64];
        for n in [1usize, 4, 10] {
            let x = ode_solve(|x, _| x.clone(), &x0, n, Solver::Euler).unwrap();
            let closed = (1.0 + 1.0 / n as f64).powi(n as i32);
            assert!((x[0] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_field_reports_step() {
        let x0 = array![1.0f64];
        let err = ode_solve(
            |x, t| if t > 0.4 { x.mapv(|_| f64::NAN) } else { x.clone() },
            &x0,
            4,
            Solver::Euler,
        )
        .unwrap_err();
        match err {
            Error::NumericalFailure { step, .. } => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ode_solve(|x, _| x.clone(), &x0, 0, Solver::Euler).is_err());
    }

    #[test]
    fn control_encoding() {
        assert_eq!(ControlSignal::Removal.encode(3), vec![0.0; 3]);
        assert_eq!(ControlSignal::Preservation.encode(2), vec![1.0; 2]);
        assert_eq!("c1".parse::<ControlSignal>().unwrap(), ControlSignal::Preservation);
    }
}
