//! Guided ODE sampling from the acoustic model.

use bgflow_core::flowmatch::{cfg_combine, ode_solve, ControlSignal, Solver};
use bgflow_core::masking::CONTEXT_FILL;
use bgflow_core::seed::stream_rng;
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::acoustic::{AcousticInput, AcousticModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    /// Visible context, `T × n_mels`; hidden frames hold the fill value.
    pub x_ctx: Array2<f32>,
    pub frame_tokens: Vec<u32>,
    pub control: Option<ControlSignal>,
    pub alpha: f32,
    pub n_steps: usize,
    pub solver: Solver,
    pub seed: u64,
}

/// Visible prompt frames followed by `total_frames − prompt` hidden frames.
pub fn prompt_context(prompt: ArrayView2<f32>, total_frames: usize) -> Result<Array2<f32>> {
    if prompt.nrows() > total_frames {
        return Err(Error::InvalidArgument(format!(
            "prompt has {} frames but the sequence only {total_frames}",
            prompt.nrows()
        )));
    }
    let mut ctx = Array2::from_elem((total_frames, prompt.ncols()), CONTEXT_FILL);
    ctx.slice_mut(s![..prompt.nrows(), ..]).assign(&prompt);
    Ok(ctx)
}

/// Integrate the guided field from Gaussian noise; returns the full
/// `T × n_mels` sample (normalized domain).
pub fn sample_mel(model: &AcousticModel<f32>, req: &SampleRequest) -> Result<Array2<f32>> {
    let dim = req.x_ctx.raw_dim();
    let t_frames = req.x_ctx.nrows();
    let mut rng = stream_rng(req.seed, 0x1f);
    let x0 = Array2::<f32>::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
    let null_ctx = Array2::<f32>::from_elem(dim, CONTEXT_FILL);
    let mut failure = None;
    let field = |w: &Array2<f32>, t: f32| -> Array2<f32> {
        let cond = AcousticInput {
            w: w.clone(),
            x_ctx: req.x_ctx.clone(),
            frame_tokens: Some(req.frame_tokens.clone()),
            t: t as f64,
            control: req.control,
        };
        let result = if req.alpha == 0.0 {
            model.forward(&cond)
        } else {
            let uncond = AcousticInput {
                x_ctx: null_ctx.clone(),
                frame_tokens: None,
                ..cond.clone()
            };
            model.forward_batch(&[cond, uncond]).and_then(|(both, _)| {
                let vc = both.slice(s![0..t_frames, ..]).to_owned();
                let vu = both.slice(s![t_frames.., ..]).to_owned();
                Ok(cfg_combine(&vc, &vu, req.alpha)?)
            })
        };
        result.unwrap_or_else(|e| {
            failure.get_or_insert(e);
            Array2::from_elem(w.raw_dim(), f32::NAN)
        })
    };
    let out = ode_solve(field, &x0, req.n_steps, req.solver);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(out?)
}
