//! Training commands: checkpoints, loss logs and resumption.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bgflow_core::flowmatch::FlowConfig;
use bgflow_core::masking::MaskConfig;
use bgflow_core::signal::{MelConfig, MelExtractor};
use bgflow_core::textfront::{CharTokenizer, Tokenizer};
use bgflow_models::acoustic::{AcousticModel, AcousticModelConfig};
use bgflow_models::adam::OptimizerConfig;
use bgflow_models::checkpoint::{Checkpoint, ModelKind};
use bgflow_models::duration::{DurationModel, DurationModelConfig};
use bgflow_models::norm::MelNorm;
use bgflow_models::train::{AcousticTrainer, DurationTrainer, LossRecord};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{acoustic_examples, duration_examples, fit_norm, load_utterances};
use crate::manifest::{Manifest, ManifestRecord};
use crate::{Error, Result};

/// Settings stored next to the weights so inference needs no config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub mel: MelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel_norm: Option<MelNorm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    pub mask: MaskConfig,
    pub optimizer: OptimizerConfig,
    pub vocabulary: Vec<String>,
}

impl RunMetadata {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Models(bgflow_models::Error::Checkpoint(format!("metadata: {e}"))))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Defaults to `<out>.loss.jsonl`.
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub save_every: Option<usize>,
}

impl TrainOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            ..Default::default()
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut s = self.out.clone().into_os_string();
            s.push(".loss.jsonl");
            PathBuf::from(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub start_step: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::manifest(path, format!("loss log: {e}"))))
        .collect()
}

struct LossLog {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl LossLog {
    /// Keeps records before `start` when resuming, so the log always
    /// reads like one uninterrupted run.
    fn open(path: PathBuf, start: usize) -> Result<Self> {
        let kept = if start > 0 && path.exists() {
            read_loss_log(&path)?.into_iter().filter(|r| r.step < start).collect()
        } else {
            Vec::new()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            path,
            out: BufWriter::new(f),
        };
        for r in &kept {
            log.push(r)?;
        }
        Ok(log)
    }

    fn push(&mut self, r: &LossRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(ck.save(path)?)
}

fn load_resume(path: &Path, kind: ModelKind, seed: u64) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != kind {
        return Err(Error::Usage(format!(
            "{} holds a {:?} model, expected {kind:?}",
            path.display(),
            ck.kind
        )));
    }
    if ck.seed != seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, config says {seed}",
            ck.seed
        )));
    }
    if ck.optimizer.is_none() {
        return Err(Error::Usage(format!("{} has no optimizer state to resume from", path.display())));
    }
    Ok(ck)
}

fn vocabulary(tok: &CharTokenizer) -> Vec<String> {
    tok.vocabulary().units().to_vec()
}

pub fn train_acoustic(cfg: &RunConfig, manifest: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let extractor = MelExtractor::new(cfg.mel.clone())?;
    let tok = CharTokenizer::default();
    let utts = load_utterances(&Manifest::<ManifestRecord>::read(manifest)?, &extractor, &tok)?;
    let seed = cfg.seeds.train;

    let (trainer, norm) = match &opts.resume {
        Some(p) => {
            let ck = load_resume(p, ModelKind::Acoustic, seed)?;
            let model_cfg: AcousticModelConfig = ck.config_as()?;
            if model_cfg != cfg.acoustic_model {
                return Err(Error::Config("checkpoint model config differs from acoustic_model".into()));
            }
            let meta = RunMetadata::from_checkpoint(&ck)?;
            let norm = meta
                .mel_norm
                .ok_or_else(|| Error::Config("checkpoint lacks mel normalization".into()))?;
            let model = AcousticModel::from_params(model_cfg, ck.params)?;
            let adam = ck.optimizer.expect("checked on load");
            let t = AcousticTrainer::resume(
                model,
                adam,
                cfg.flow.clone(),
                cfg.acoustic_optimizer.clone(),
                cfg.mask,
                seed,
            )?;
            (t, norm)
        }
        None => {
            let norm = fit_norm(&utts)?;
            let model = AcousticModel::new(cfg.acoustic_model.clone(), seed)?;
            let t = AcousticTrainer::new(model, cfg.flow.clone(), cfg.acoustic_optimizer.clone(), cfg.mask, seed)?;
            (t, norm)
        }
    };
    let data = acoustic_examples(&utts, &norm);
    let meta = RunMetadata {
        mel: cfg.mel.clone(),
        mel_norm: Some(norm),
        flow: Some(cfg.flow.clone()),
        mask: cfg.mask,
        optimizer: cfg.acoustic_optimizer.clone(),
        vocabulary: vocabulary(&tok),
    };
    let total = cfg.acoustic_optimizer.total_steps(data.len());
    let start = trainer.steps_done();
    let mut trainer = trainer;
    let mut log = LossLog::open(opts.log_path(), start)?;
    let snapshot = |t: &AcousticTrainer| Checkpoint {
        kind: ModelKind::Acoustic,
        model_config: serde_json::to_value(t.model().config()).expect("config serializes"),
        seed,
        step: t.steps_done(),
        params: t.model().params().clone(),
        optimizer: Some(t.adam().clone()),
        metadata: serde_json::to_value(&meta).expect("metadata serializes"),
    };
    let mut last = None;
    while trainer.steps_done() < total {
        let rec = trainer.step(&data)?;
        log.push(&rec)?;
        last = Some(rec.loss);
        if let Some(every) = opts.save_every.filter(|&e| e > 0) {
            if trainer.steps_done() % every == 0 {
                log.flush()?;
                save(&snapshot(&trainer), &opts.out)?;
            }
        }
    }
    log.flush()?;
    save(&snapshot(&trainer), &opts.out)?;
    Ok(TrainSummary {
        checkpoint: opts.out.clone(),
        log: log.path.clone(),
        start_step: start,
        steps: trainer.steps_done(),
        final_loss: last,
    })
}

pub fn train_duration(cfg: &RunConfig, manifest: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let m = Manifest::<ManifestRecord>::read(manifest)?;
    if let Some(r) = m.records.iter().find(|r| r.durations.is_none()) {
        return Err(Error::manifest(
            &m.path,
            format!("record {:?} has no durations; duration training needs them", r.id),
        ));
    }
    let extractor = MelExtractor::new(cfg.mel.clone())?;
    let tok = CharTokenizer::default();
    let data = duration_examples(&load_utterances(&m, &extractor, &tok)?);
    let seed = cfg.seeds.train;

    let mut trainer = match &opts.resume {
        Some(p) => {
            let ck = load_resume(p, ModelKind::Duration, seed)?;
            let model_cfg: DurationModelConfig = ck.config_as()?;
            if model_cfg != cfg.duration_model {
                return Err(Error::Config("checkpoint model config differs from duration_model".into()));
            }
            let model = DurationModel::from_params(model_cfg, ck.params)?;
            let adam = ck.optimizer.expect("checked on load");
            DurationTrainer::resume(model, adam, cfg.duration_optimizer.clone(), cfg.mask, seed)?
        }
        None => {
            let model = DurationModel::new(cfg.duration_model.clone(), seed)?;
            DurationTrainer::new(model, cfg.duration_optimizer.clone(), cfg.mask, seed)?
        }
    };
    let meta = RunMetadata {
        mel: cfg.mel.clone(),
        mel_norm: None,
        flow: None,
        mask: cfg.mask,
        optimizer: cfg.duration_optimizer.clone(),
        vocabulary: vocabulary(&tok),
    };
    let total = cfg.duration_optimizer.total_steps(data.len());
    let start = trainer.steps_done();
    let mut log = LossLog::open(opts.log_path(), start)?;
    let snapshot = |t: &DurationTrainer| Checkpoint {
        kind: ModelKind::Duration,
        model_config: serde_json::to_value(t.model().config()).expect("config serializes"),
        seed,
        step: t.steps_done(),
        params: t.model().params().clone(),
        optimizer: Some(t.adam().clone()),
        metadata: serde_json::to_value(&meta).expect("metadata serializes"),
    };
    let mut last = None;
    while trainer.steps_done() < total {
        let rec = trainer.step(&data)?;
        log.push(&rec)?;
        last = Some(rec.loss);
        if let Some(every) = opts.save_every.filter(|&e| e > 0) {
            if trainer.steps_done() % every == 0 {
                log.flush()?;
                save(&snapshot(&trainer), &opts.out)?;
            }
        }
    }
    log.flush()?;
    save(&snapshot(&trainer), &opts.out)?;
    Ok(TrainSummary {
        checkpoint: opts.out.clone(),
        log: log.path.clone(),
        start_step: start,
        steps: trainer.steps_done(),
        final_loss: last,
    })
}
