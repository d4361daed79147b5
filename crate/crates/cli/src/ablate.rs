//! Encoder/strategy ablation grid over one simulated manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bgflow_core::augment::Condition;
use bgflow_core::evaluate::{
    build_report, AblationMetric, AblationTable, EvalContext, EvalPair, EvalReport, EvalSignal, ReferenceEmbedder,
    ReferenceKind,
};
use bgflow_core::flowmatch::ControlSignal;
use bgflow_core::signal::{MelExtractor, MelSpectrogram};
use bgflow_core::textfront::CharTokenizer;
use bgflow_models::acoustic::{AcousticModel, EncoderMode, Strategy};
use bgflow_models::norm::MelNorm;
use bgflow_models::train::AcousticTrainer;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{acoustic_examples, fit_norm, load_utterances, Utterance};
use crate::manifest::{Manifest, ManifestRecord};
use crate::synth::{prompt_frames, resynthesize_tail, Sampling};
use crate::{Error, Result};

/// Shortest generated span the reference embedder accepts, in seconds.
const MIN_EVAL_SECS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Removal(u8),
    Preservation(u8),
}

impl Arm {
    pub fn parse(s: &str) -> Result<Self> {
        let arm = match s {
            "R1" => Arm::Removal(1),
            "R2" => Arm::Removal(2),
            "R3" => Arm::Removal(3),
            "R4" => Arm::Removal(4),
            "R5" => Arm::Removal(5),
            "P1" => Arm::Preservation(1),
            "P2" => Arm::Preservation(2),
            "P3" => Arm::Preservation(3),
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation arm {s:?}; valid arms are R1..R5 and P1..P3 (dual encoders with MSD are not an arm)"
                )))
            }
        };
        Ok(arm)
    }

    pub fn id(self) -> String {
        match self {
            Arm::Removal(i) => format!("R{i}"),
            Arm::Preservation(i) => format!("P{i}"),
        }
    }

    /// Model variant the row is measured on.
    pub fn variant(self) -> (EncoderMode, Strategy) {
        match self {
            Arm::Removal(1) => (EncoderMode::None, Strategy::Msd),
            Arm::Removal(2) | Arm::Preservation(1) => (EncoderMode::None, Strategy::Cmsp),
            Arm::Removal(3) => (EncoderMode::Single, Strategy::Msd),
            Arm::Removal(4) | Arm::Preservation(2) => (EncoderMode::Single, Strategy::Cmsp),
            _ => (EncoderMode::Dual, Strategy::Cmsp),
        }
    }
}

fn encoder_label(m: EncoderMode) -> &'static str {
    match m {
        EncoderMode::None => "No",
        EncoderMode::Single => "Single",
        EncoderMode::Dual => "Dual",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantRun {
    pub spk_encoder: EncoderMode,
    pub strategy: Strategy,
    pub steps: usize,
    pub final_loss: f64,
    /// Augmentation sources of the training records, in manifest order.
    pub source_ids: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub removal: AblationTable,
    pub preservation: AblationTable,
    pub variants: Vec<VariantRun>,
    pub eval_ids: Vec<String>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in [&self.removal, &self.preservation] {
            if !t.rows.is_empty() {
                out += &t.to_text();
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let json = out.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("json") + "\n").map_err(|e| Error::io(&json, e))?;
        let txt = out.join("ablation.txt");
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

fn score(
    model: &AcousticModel<f32>,
    utts: &[&Utterance],
    norm: &MelNorm,
    cfg: &RunConfig,
    task: ControlSignal,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let p = prompt_frames(u.n_frames(), cfg.synthesis.prompt_fraction);
        let source = norm.normalize(&u.augmented);
        let sampling = Sampling {
            alpha: cfg.synthesis.alpha,
            n_steps: cfg.synthesis.n_steps,
            solver: cfg.synthesis.solver,
            seed: bgflow_core::seed::derive_seed(cfg.seeds.synthesize, i as u64),
        };
        let gen = resynthesize_tail(model, source.view(), &u.frame_tokens(), p, task, sampling)?;
        let (truth, kind) = match task {
            ControlSignal::Removal => (&u.clean, ReferenceKind::Clean),
            ControlSignal::Preservation => (&u.augmented, ReferenceKind::Noisy),
        };
        let reference = truth.slice(ndarray::s![p.., ..]).to_owned();
        pairs.push(EvalPair {
            id: u.id.clone(),
            generated: EvalSignal::Mel(MelSpectrogram::new(norm.denormalize(&gen))?),
            reference: EvalSignal::Mel(MelSpectrogram::new(reference)?),
            reference_kind: kind,
            task,
            condition: u.condition,
            snr_db: u.snr_db,
        });
    }
    Ok(build_report(&pairs, &cfg.evaluation.bucket_edges, ctx)?)
}

/// Train every model variant the requested arms need (same data, seed and
/// schedule), then score held-in resyntheses: speaker similarity for the
/// removal rows, MCD against the noisy ground truth for preservation rows.
pub fn ablate(cfg: &RunConfig, manifest: &Path, arms: &[String]) -> Result<AblationReport> {
    if arms.is_empty() {
        return Err(Error::Usage("ablation needs at least one arm".into()));
    }
    let mut parsed = arms.iter().map(|a| Arm::parse(a)).collect::<Result<Vec<_>>>()?;
    parsed.sort();
    parsed.dedup();

    let extractor = MelExtractor::new(cfg.mel.clone())?;
    let m = Manifest::<ManifestRecord>::read(manifest)?;
    let utts = load_utterances(&m, &extractor, &CharTokenizer::default())?;
    let norm = fit_norm(&utts)?;
    let data = acoustic_examples(&utts, &norm);
    let hop_secs = cfg.mel.hop_seconds();
    let eval: Vec<&Utterance> = utts
        .iter()
        .filter(|u| {
            let tail = u.n_frames() - prompt_frames(u.n_frames(), cfg.synthesis.prompt_fraction);
            tail as f64 * hop_secs >= MIN_EVAL_SECS
        })
        .take(cfg.ablation.eval_utterances)
        .collect();
    if eval.is_empty() {
        return Err(Error::Usage(format!(
            "no utterance leaves {MIN_EVAL_SECS} s to generate after the prompt"
        )));
    }
    let embedder = ReferenceEmbedder::new(extractor.clone());
    let ctx = EvalContext {
        extractor: &extractor,
        embedder: &embedder,
        vocoder_iters: cfg.evaluation.vocoder_iters,
        vocoder_seed: cfg.evaluation.vocoder_seed,
    };

    let mut variants: BTreeMap<(u8, u8), (VariantRun, AcousticModel<f32>)> = BTreeMap::new();
    let key = |(e, s): (EncoderMode, Strategy)| (e as u8, s as u8);
    for arm in &parsed {
        let v = arm.variant();
        if variants.contains_key(&key(v)) {
            continue;
        }
        let model_cfg = bgflow_models::acoustic::AcousticModelConfig {
            encoder_mode: v.0,
            strategy: v.1,
            ..cfg.acoustic_model.clone()
        };
        let model = AcousticModel::new(model_cfg, cfg.seeds.train)?;
        let mut trainer = AcousticTrainer::new(
            model,
            cfg.flow.clone(),
            cfg.acoustic_optimizer.clone(),
            cfg.mask,
            cfg.seeds.train,
        )?;
        let total = cfg.acoustic_optimizer.total_steps(data.len());
        let log = trainer.run(&data, total, |_| {})?;
        let run = VariantRun {
            spk_encoder: v.0,
            strategy: v.1,
            steps: trainer.steps_done(),
            final_loss: log.last().map(|r| r.loss).unwrap_or(f64::NAN),
            source_ids: utts.iter().map(|u| u.source_ids.clone()).collect(),
        };
        variants.insert(key(v), (run, trainer.into_parts().0));
    }

    let mut removal = AblationTable::new(
        "Speaker similarity, background removal",
        AblationMetric::Sim,
        Condition::ALL.to_vec(),
    );
    let mut preservation = AblationTable::new(
        "MCD (dB) against noisy ground truth, background preservation",
        AblationMetric::McdDb,
        vec![Condition::Noise, Condition::Reverb, Condition::Interference],
    );
    let mut cache: BTreeMap<((u8, u8), ControlSignal), EvalReport> = BTreeMap::new();
    for arm in &parsed {
        let v = arm.variant();
        let (table, task) = match arm {
            Arm::Removal(_) => (&mut removal, ControlSignal::Removal),
            Arm::Preservation(_) => (&mut preservation, ControlSignal::Preservation),
        };
        let ck = (key(v), task);
        if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(ck) {
            let model = &variants[&key(v)].1;
            e.insert(score(model, &eval, &norm, cfg, task, &ctx)?);
        }
        table.push(&arm.id(), encoder_label(v.0), v.1.as_str(), &cache[&ck]);
    }
    Ok(AblationReport {
        removal,
        preservation,
        variants: variants.into_values().map(|(r, _)| r).collect(),
        eval_ids: eval.iter().map(|u| u.id.clone()).collect(),
    })
}
