//! Training loops for the acoustic and duration models.
//!
//! All randomness of step `k` comes from a stream keyed by `(seed, k)` and
//! the example order of epoch `e` from a stream keyed by `(seed, e)`, so a
//! run resumed from a checkpoint at step `k` continues exactly as an
//! uninterrupted one would.

use bgflow_core::flowmatch::{cfg_dropout, flow_target, masked_mse_with_grad, ot_path, Conditioning, ControlSignal, FlowConfig};
use bgflow_core::masking::{apply_mask, MaskConfig, MaskSpec};
use bgflow_core::seed::{derive_seed, stream_rng};
use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticInput, AcousticModel, AcousticModelConfig, Strategy};
use crate::adam::{AdamState, OptimizerConfig};
use crate::duration::{log_duration, DurationInput, DurationModel, DurationModelConfig};
use crate::{Error, Result};

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// One utterance of (normalized) training mels.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticExample {
    pub id: String,
    pub clean: Array2<f32>,
    pub augmented: Array2<f32>,
    /// Token id per frame.
    pub frame_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationExample {
    pub id: String,
    pub ids: Vec<u32>,
    pub durations: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub removal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preservation: Option<f64>,
    pub lr: f64,
}

/// Example indices used at `step`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let epoch = step / per_epoch;
    let pos = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(derive_seed(seed, epoch as u64), 0xe0));
    order[pos * batch_size..((pos + 1) * batch_size).min(n)].to_vec()
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

fn check_acoustic_data(data: &[AcousticExample], cfg: &AcousticModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for ex in data {
        let t = ex.clean.nrows();
        if t == 0
            || ex.clean.ncols() != cfg.n_mels
            || ex.augmented.dim() != ex.clean.dim()
            || ex.frame_tokens.len() != t
        {
            return Err(Error::Shape(format!(
                "example {}: clean {:?}, augmented {:?}, {} frame tokens, model expects {} mels",
                ex.id,
                ex.clean.dim(),
                ex.augmented.dim(),
                ex.frame_tokens.len(),
                cfg.n_mels
            )));
        }
    }
    Ok(())
}

pub struct AcousticTrainer {
    model: AcousticModel<f32>,
    adam: AdamState,
    flow: FlowConfig,
    optimizer: OptimizerConfig,
    mask: MaskConfig,
    seed: u64,
}

struct Sequence {
    input: AcousticInput<f32>,
    target: Array2<f32>,
    mask: MaskSpec,
    control: Option<ControlSignal>,
}

impl AcousticTrainer {
    pub fn new(
        model: AcousticModel<f32>,
        flow: FlowConfig,
        optimizer: OptimizerConfig,
        mask: MaskConfig,
        seed: u64,
    ) -> Result<Self> {
        let adam = AdamState::new(model.params());
        Self::resume(model, adam, flow, optimizer, mask, seed)
    }

    /// Continue from a saved model and optimizer state.
    pub fn resume(
        model: AcousticModel<f32>,
        adam: AdamState,
        flow: FlowConfig,
        optimizer: OptimizerConfig,
        mask: MaskConfig,
        seed: u64,
    ) -> Result<Self> {
        flow.validate()?;
        optimizer.validate()?;
        mask.validate()?;
        if adam.m.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            adam,
            flow,
            optimizer,
            mask,
            seed,
        })
    }

    pub fn model(&self) -> &AcousticModel<f32> {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps_done(&self) -> usize {
        self.adam.step
    }

    pub fn into_parts(self) -> (AcousticModel<f32>, AdamState) {
        (self.model, self.adam)
    }

    fn build_sequences(&self, data: &[AcousticExample], step: usize) -> Result<(Vec<Sequence>, usize)> {
        let idx = batch_indices(data.len(), self.optimizer.batch_size, self.seed, step);
        let mut rng = stream_rng(derive_seed(self.seed, step as u64), 0x5e);
        let sigma = self.flow.sigma_min as f32;
        let strategy = self.model.config().strategy;

        let mut draws = Vec::with_capacity(idx.len());
        let mut conds = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ex = &data[i];
            let t_frames = ex.clean.nrows();
            let mask = self.mask.sample(t_frames, &mut rng)?;
            let t: f32 = rng.random();
            let x0 = Array2::<f32>::from_shape_simple_fn(ex.clean.raw_dim(), || rng.sample(StandardNormal));
            let triple = apply_mask(ex.clean.view(), ex.augmented.view(), &mask)?;
            conds.push(Conditioning {
                context: triple.context,
                frame_tokens: Some(ex.frame_tokens.clone()),
                control: None,
            });
            draws.push((i, mask, t, x0));
        }
        cfg_dropout(&mut conds, self.flow.p_uncond, &mut rng)?;

        let mut seqs = Vec::new();
        for ((i, mask, t, x0), cond) in draws.into_iter().zip(conds) {
            let ex = &data[i];
            let arms: Vec<(Option<ControlSignal>, &Array2<f32>)> = match strategy {
                Strategy::Cmsp => vec![
                    (Some(ControlSignal::Removal), &ex.clean),
                    (Some(ControlSignal::Preservation), &ex.augmented),
                ],
                Strategy::Msd => vec![(None, &ex.clean)],
            };
            for (control, x1) in arms {
                let (w, _) = ot_path(&x0, x1, t, sigma)?;
                seqs.push(Sequence {
                    input: AcousticInput {
                        w,
                        x_ctx: cond.context.clone(),
                        frame_tokens: cond.frame_tokens.clone(),
                        t: t as f64,
                        control,
                    },
                    target: flow_target(x1.view(), x0.view(), self.flow.sigma_min)?,
                    mask: mask.clone(),
                    control,
                });
            }
        }
        Ok((seqs, idx.len()))
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn step(&mut self, data: &[AcousticExample]) -> Result<LossRecord> {
        check_acoustic_data(data, self.model.config())?;
        let step = self.adam.step;
        let (seqs, n_utts) = self.build_sequences(data, step)?;
        let inputs: Vec<AcousticInput<f32>> = seqs.iter().map(|s| s.input.clone()).collect();
        let (out, cache) = self.model.forward_batch(&inputs)?;

        let mut d_out = Array2::<f32>::zeros(out.raw_dim());
        let (mut removal, mut preservation, mut plain) = (0.0, 0.0, 0.0);
        let mut row = 0;
        for seq in &seqs {
            let t = seq.target.nrows();
            let pred = out.slice(s![row..row + t, ..]);
            let (l, g) = masked_mse_with_grad(pred, seq.target.view(), &seq.mask)?;
            d_out
                .slice_mut(s![row..row + t, ..])
                .assign(&(g / n_utts as f32));
            match seq.control {
                Some(ControlSignal::Removal) => removal += l,
                Some(ControlSignal::Preservation) => preservation += l,
                None => plain += l,
            }
            row += t;
        }
        let n = n_utts as f64;
        let record = match self.model.config().strategy {
            Strategy::Cmsp => LossRecord {
                step,
                loss: (removal + preservation) / n,
                removal: Some(removal / n),
                preservation: Some(preservation / n),
                lr: self.optimizer.lr_at(step),
            },
            Strategy::Msd => LossRecord {
                step,
                loss: plain / n,
                removal: None,
                preservation: None,
                lr: self.optimizer.lr_at(step),
            },
        };
        check_loss(step, record.loss)?;
        let mut grads = self.model.backward(&cache, &d_out);
        self.adam.update(&self.optimizer, self.model.params_mut(), &mut grads);
        Ok(record)
    }

    /// Step until `until_step` optimizer steps have been taken in total.
    pub fn run(
        &mut self,
        data: &[AcousticExample],
        until_step: usize,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let mut log = Vec::new();
        while self.adam.step < until_step {
            let rec = self.step(data)?;
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

/// Train a fresh acoustic model for the step budget implied by `optimizer`.
pub fn train_acoustic(
    data: &[AcousticExample],
    cfg: AcousticModelConfig,
    flow: FlowConfig,
    optimizer: OptimizerConfig,
    mask: MaskConfig,
    seed: u64,
) -> Result<(AcousticTrainer, Vec<LossRecord>)> {
    let total = optimizer.total_steps(data.len());
    let model = AcousticModel::new(cfg, seed)?;
    let mut trainer = AcousticTrainer::new(model, flow, optimizer, mask, seed)?;
    let log = trainer.run(data, total, |_| {})?;
    Ok((trainer, log))
}

pub struct DurationTrainer {
    model: DurationModel<f32>,
    adam: AdamState,
    optimizer: OptimizerConfig,
    mask: MaskConfig,
    seed: u64,
}

fn check_duration_data(data: &[DurationExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for ex in data {
        if ex.ids.is_empty() || ex.ids.len() != ex.durations.len() {
            return Err(Error::Shape(format!(
                "example {}: {} tokens, {} durations",
                ex.id,
                ex.ids.len(),
                ex.durations.len()
            )));
        }
        if ex.durations.contains(&0) {
            return Err(Error::InvalidArgument(format!("example {} has a zero duration", ex.id)));
        }
    }
    Ok(())
}

impl DurationTrainer {
    pub fn new(model: DurationModel<f32>, optimizer: OptimizerConfig, mask: MaskConfig, seed: u64) -> Result<Self> {
        let adam = AdamState::new(model.params());
        Self::resume(model, adam, optimizer, mask, seed)
    }

    pub fn resume(
        model: DurationModel<f32>,
        adam: AdamState,
        optimizer: OptimizerConfig,
        mask: MaskConfig,
        seed: u64,
    ) -> Result<Self> {
        optimizer.validate()?;
        mask.validate()?;
        if adam.m.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            adam,
            optimizer,
            mask,
            seed,
        })
    }

    pub fn model(&self) -> &DurationModel<f32> {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps_done(&self) -> usize {
        self.adam.step
    }

    pub fn into_parts(self) -> (DurationModel<f32>, AdamState) {
        (self.model, self.adam)
    }

    /// Masked L1 on `log(d + 1)`, averaged over masked tokens then utterances.
    pub fn step(&mut self, data: &[DurationExample]) -> Result<LossRecord> {
        check_duration_data(data)?;
        let step = self.adam.step;
        let idx = batch_indices(data.len(), self.optimizer.batch_size, self.seed, step);
        let mut rng = stream_rng(derive_seed(self.seed, step as u64), 0xd5);
        let mut batch = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ex = &data[i];
            let mask = self.mask.sample(ex.ids.len(), &mut rng)?;
            batch.push(DurationInput {
                ids: ex.ids.clone(),
                durations: ex.durations.clone(),
                masked: mask.flags().to_vec(),
            });
        }
        let (out, cache) = self.model.forward_batch(&batch)?;
        let mut d_out = Array1::<f32>::zeros(out.len());
        let mut total = 0.0;
        let mut row = 0;
        let n_utts = batch.len() as f64;
        for x in &batch {
            let n_masked = x.masked.iter().filter(|&&m| m).count() as f64;
            let mut l = 0.0;
            for (k, (&d, &m)) in x.durations.iter().zip(&x.masked).enumerate() {
                if m {
                    let r = out[row + k] as f64 - log_duration(d);
                    l += r.abs();
                    d_out[row + k] = (r.signum() / (n_masked * n_utts)) as f32;
                }
            }
            total += l / n_masked;
            row += x.len();
        }
        let record = LossRecord {
            step,
            loss: total / n_utts,
            removal: None,
            preservation: None,
            lr: self.optimizer.lr_at(step),
        };
        check_loss(step, record.loss)?;
        let mut grads = self.model.backward(&cache, &d_out);
        self.adam.update(&self.optimizer, self.model.params_mut(), &mut grads);
        Ok(record)
    }

    pub fn run(
        &mut self,
        data: &[DurationExample],
        until_step: usize,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let mut log = Vec::new();
        while self.adam.step < until_step {
            let rec = self.step(data)?;
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

pub fn train_duration(
    data: &[DurationExample],
    cfg: DurationModelConfig,
    optimizer: OptimizerConfig,
    mask: MaskConfig,
    seed: u64,
) -> Result<(DurationTrainer, Vec<LossRecord>)> {
    let total = optimizer.total_steps(data.len());
    let model = DurationModel::new(cfg, seed)?;
    let mut trainer = DurationTrainer::new(model, optimizer, mask, seed)?;
    let log = trainer.run(data, total, |_| {})?;
    Ok((trainer, log))
}
