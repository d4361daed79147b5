//! Zero-shot synthesis from a prompt and prompted resynthesis.

use std::path::Path;

use bgflow_core::flowmatch::{ControlSignal, Solver};
use bgflow_core::signal::{griffin_lim_vocode, MelExtractor, MelSpectrogram, Waveform};
use bgflow_core::textfront::{uniform_align, CharTokenizer, Tokenizer, Vocabulary};
use bgflow_models::acoustic::AcousticModel;
use bgflow_models::checkpoint::{Checkpoint, ModelKind};
use bgflow_models::duration::{expand_ids, DurationInput, DurationModel};
use bgflow_models::infer::{prompt_context, sample_mel, SampleRequest};
use bgflow_models::norm::MelNorm;
use ndarray::{s, Array2, ArrayView2};

use crate::data::load_wave;
use crate::train::RunMetadata;
use crate::{Error, Result};

/// Guidance and solver settings for one generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub alpha: f32,
    pub n_steps: usize,
    pub solver: Solver,
    pub seed: u64,
}

/// Control input for `task`, or none for models trained without one.
pub fn control_for(model: &AcousticModel<f32>, task: ControlSignal) -> Option<ControlSignal> {
    model.config().uses_control().then_some(task)
}

/// Keep the first `prompt_frames` of `source` (normalized mel) visible and
/// regenerate the rest. Returns only the regenerated frames.
pub fn resynthesize_tail(
    model: &AcousticModel<f32>,
    source: ArrayView2<f32>,
    frame_tokens: &[u32],
    prompt_frames: usize,
    task: ControlSignal,
    sampling: Sampling,
) -> Result<Array2<f32>> {
    let t = source.nrows();
    if prompt_frames >= t {
        return Err(Error::Usage(format!("prompt of {prompt_frames} frames leaves nothing of {t} to generate")));
    }
    let req = SampleRequest {
        x_ctx: prompt_context(source.slice(s![..prompt_frames, ..]), t)?,
        frame_tokens: frame_tokens.to_vec(),
        control: control_for(model, task),
        alpha: sampling.alpha,
        n_steps: sampling.n_steps,
        solver: sampling.solver,
        seed: sampling.seed,
    };
    let full = sample_mel(model, &req)?;
    Ok(full.slice(s![prompt_frames.., ..]).to_owned())
}

/// Number of leading frames kept as prompt.
pub fn prompt_frames(n_frames: usize, fraction: f64) -> usize {
    ((n_frames as f64 * fraction).round() as usize).clamp(1, n_frames.saturating_sub(1).max(1))
}

pub struct Synthesizer {
    pub acoustic: AcousticModel<f32>,
    pub duration: DurationModel<f32>,
    pub norm: MelNorm,
    pub extractor: MelExtractor,
    pub tokenizer: CharTokenizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub prompt_wav: std::path::PathBuf,
    pub prompt_text: String,
    pub prompt_durations: Option<Vec<u32>>,
    pub target_text: String,
    pub task: ControlSignal,
    pub sampling: Sampling,
    pub vocoder_iters: usize,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    /// Log-mel of the generated target region only.
    pub mel: MelSpectrogram,
    pub wave: Waveform,
    pub durations: Vec<u32>,
}

impl Synthesizer {
    pub fn load(acoustic: &Path, duration: &Path) -> Result<Self> {
        let ack = Checkpoint::load(acoustic)?;
        let dck = Checkpoint::load(duration)?;
        for (ck, kind, p) in [(&ack, ModelKind::Acoustic, acoustic), (&dck, ModelKind::Duration, duration)] {
            if ck.kind != kind {
                return Err(Error::Usage(format!("{} holds a {:?} model, expected {kind:?}", p.display(), ck.kind)));
            }
        }
        let meta = RunMetadata::from_checkpoint(&ack)?;
        let dmeta = RunMetadata::from_checkpoint(&dck)?;
        if meta.vocabulary != dmeta.vocabulary {
            return Err(Error::Config("acoustic and duration checkpoints use different vocabularies".into()));
        }
        let norm = meta
            .mel_norm
            .ok_or_else(|| Error::Config("acoustic checkpoint lacks mel normalization".into()))?;
        Ok(Self {
            acoustic: AcousticModel::from_params(ack.config_as()?, ack.params)?,
            duration: DurationModel::from_params(dck.config_as()?, dck.params)?,
            norm,
            extractor: MelExtractor::new(meta.mel)?,
            tokenizer: CharTokenizer::new(Vocabulary::new(meta.vocabulary)?),
        })
    }

    /// Durations for the target tokens, with the prompt's tokens and
    /// durations as visible context.
    pub fn target_durations(&self, prompt_ids: &[u32], prompt_durs: &[u32], target_ids: &[u32]) -> Result<Vec<u32>> {
        let mut ids = prompt_ids.to_vec();
        ids.extend_from_slice(target_ids);
        let mut durations = prompt_durs.to_vec();
        durations.extend(std::iter::repeat_n(1, target_ids.len()));
        let mut masked = vec![false; prompt_ids.len()];
        masked.extend(std::iter::repeat_n(true, target_ids.len()));
        Ok(self.duration.predict_masked(&DurationInput { ids, durations, masked })?)
    }

    pub fn synthesize(&self, req: &SynthesisRequest) -> Result<SynthesisOutput> {
        let wave = load_wave(&req.prompt_wav, self.extractor.config().sample_rate)?;
        let prompt = self.norm.normalize(&self.extractor.extract(&wave)?.into_frames());
        let p_tokens = self.tokenizer.tokenize(&req.prompt_text)?;
        let p_durs = match &req.prompt_durations {
            Some(d) => {
                let total: usize = d.iter().map(|&x| x as usize).sum();
                if d.len() != p_tokens.len() || total != prompt.nrows() {
                    return Err(Error::Usage(format!(
                        "prompt durations must give one count per token ({}) summing to {} frames",
                        p_tokens.len(),
                        prompt.nrows()
                    )));
                }
                d.clone()
            }
            None => uniform_align(&p_tokens, prompt.nrows())?.durations,
        };
        let t_tokens = self.tokenizer.tokenize(&req.target_text)?;
        let t_durs = self.target_durations(&p_tokens.ids, &p_durs, &t_tokens.ids)?;

        let mut frame_tokens = expand_ids(&p_tokens.ids, &p_durs)?;
        frame_tokens.extend(expand_ids(&t_tokens.ids, &t_durs)?);
        let total = frame_tokens.len();
        let req_s = SampleRequest {
            x_ctx: prompt_context(prompt.view(), total)?,
            frame_tokens,
            control: control_for(&self.acoustic, req.task),
            alpha: req.sampling.alpha,
            n_steps: req.sampling.n_steps,
            solver: req.sampling.solver,
            seed: req.sampling.seed,
        };
        let full = sample_mel(&self.acoustic, &req_s)?;
        let target = self.norm.denormalize(&full.slice(s![prompt.nrows().., ..]).to_owned());
        let mel = MelSpectrogram::new(target)?;
        let wave = griffin_lim_vocode(&self.extractor, &mel, req.vocoder_iters, req.sampling.seed)?;
        Ok(SynthesisOutput {
            mel,
            wave,
            durations: t_durs,
        })
    }
}
