//! Declarative run configuration: one JSON file, optionally layered on
//! other files or built-in presets through `include`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use bgflow_core::augment::AugmentationConfig;
use bgflow_core::evaluate::validate_bucket_edges;
use bgflow_core::flowmatch::{FlowConfig, Solver};
use bgflow_core::masking::MaskConfig;
use bgflow_core::signal::MelConfig;
use bgflow_models::acoustic::AcousticModelConfig;
use bgflow_models::adam::OptimizerConfig;
use bgflow_models::duration::DurationModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "BGFLOW_CONFIG";

const PRESET_PREFIX: &str = "preset:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub simulate: u64,
    pub train: u64,
    pub synthesize: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            simulate: 1,
            train: 1,
            synthesize: 1,
        }
    }
}

/// Pool manifests for augmentation; relative paths are resolved against
/// the directory of the config file that names them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolPaths {
    pub noise: Option<PathBuf>,
    pub rir: Option<PathBuf>,
    pub interferers: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub alpha: f32,
    pub n_steps: usize,
    pub solver: Solver,
    pub vocoder_iters: usize,
    /// Leading share of an utterance kept visible when resynthesizing it.
    pub prompt_fraction: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            n_steps: 32,
            solver: Solver::Midpoint,
            vocoder_iters: 32,
            prompt_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub bucket_edges: Vec<f64>,
    pub vocoder_iters: usize,
    pub vocoder_seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bucket_edges: vec![-5.0, 0.0, 5.0, 10.0],
            vocoder_iters: 32,
            vocoder_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Row ids to produce, from R1..R5 and P1..P3.
    pub arms: Vec<String>,
    /// Held-in utterances scored per arm.
    pub eval_utterances: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arms: ["R1", "R2", "R3", "R4", "R5", "P1", "P2", "P3"].map(String::from).to_vec(),
            eval_utterances: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mel: MelConfig,
    pub augmentation: AugmentationConfig,
    pub flow: FlowConfig,
    pub mask: MaskConfig,
    pub acoustic_model: AcousticModelConfig,
    pub duration_model: DurationModelConfig,
    pub acoustic_optimizer: OptimizerConfig,
    pub duration_optimizer: OptimizerConfig,
    pub synthesis: SynthesisConfig,
    pub evaluation: EvaluationConfig,
    pub seeds: Seeds,
    pub pools: PoolPaths,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            augmentation: AugmentationConfig::default(),
            flow: FlowConfig::default(),
            mask: MaskConfig::default(),
            acoustic_model: AcousticModelConfig::default(),
            duration_model: DurationModelConfig::default(),
            acoustic_optimizer: OptimizerConfig::default(),
            duration_optimizer: OptimizerConfig {
                batch_size: 24,
                ..OptimizerConfig::default()
            },
            synthesis: SynthesisConfig::default(),
            evaluation: EvaluationConfig::default(),
            seeds: Seeds::default(),
            pools: PoolPaths::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale models and a faster optimizer schedule for toy corpora.
    pub fn toy() -> Self {
        let base = Self::default();
        Self {
            acoustic_model: AcousticModelConfig::desk(),
            duration_model: DurationModelConfig::desk(),
            acoustic_optimizer: OptimizerConfig {
                lr: 5e-4,
                warmup_steps: 200,
                ..base.acoustic_optimizer.clone()
            },
            duration_optimizer: OptimizerConfig {
                lr: 1e-3,
                warmup_steps: 50,
                ..base.duration_optimizer.clone()
            },
            ..base
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected full or toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.augmentation.validate()?;
        self.flow.validate()?;
        self.mask.validate()?;
        self.acoustic_model.validate()?;
        self.duration_model.validate()?;
        self.acoustic_optimizer.validate()?;
        self.duration_optimizer.validate()?;
        if self.acoustic_model.n_mels != self.mel.n_mels {
            return Err(Error::Config(format!(
                "acoustic_model.n_mels ({}) must equal mel.n_mels ({})",
                self.acoustic_model.n_mels, self.mel.n_mels
            )));
        }
        let vocab = bgflow_core::textfront::Vocabulary::default_characters().len();
        for (name, v) in [
            ("acoustic_model.vocab_size", self.acoustic_model.vocab_size),
            ("duration_model.vocab_size", self.duration_model.vocab_size),
        ] {
            if v < vocab {
                return Err(Error::Config(format!("{name} ({v}) is smaller than the tokenizer vocabulary ({vocab})")));
            }
        }
        let s = &self.synthesis;
        if !(s.alpha >= 0.0 && s.alpha.is_finite()) {
            return Err(Error::Config(format!("synthesis.alpha must be >= 0, got {}", s.alpha)));
        }
        if s.n_steps == 0 || s.vocoder_iters == 0 {
            return Err(Error::Config("synthesis.n_steps and synthesis.vocoder_iters must be positive".into()));
        }
        if !(s.prompt_fraction > 0.0 && s.prompt_fraction < 1.0) {
            return Err(Error::Config(format!(
                "synthesis.prompt_fraction must lie in (0, 1), got {}",
                s.prompt_fraction
            )));
        }
        validate_bucket_edges(&self.evaluation.bucket_edges)
            .map_err(|e| Error::Config(format!("evaluation.bucket_edges: {e}")))?;
        if self.evaluation.vocoder_iters == 0 {
            return Err(Error::Config("evaluation.vocoder_iters must be positive".into()));
        }
        for arm in &self.ablation.arms {
            crate::ablate::Arm::parse(arm)?;
        }
        if self.ablation.eval_utterances == 0 {
            return Err(Error::Config("ablation.eval_utterances must be positive".into()));
        }
        Ok(())
    }

    /// Load `path`, resolving includes, then validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let value = load_value(path.as_ref(), &mut seen)?;
        Self::from_value(value)
    }

    /// Parse an in-memory document; `include` entries may only name presets.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut seen = BTreeSet::new();
        Self::from_value(resolve(v, None, &mut seen)?)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config to use when none was given: `$BGFLOW_CONFIG` if set,
    /// otherwise the full-size defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }
}

fn load_value(path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<Value> {
    let canon = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    if !seen.insert(canon.clone()) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = fs::read_to_string(&canon).map_err(|e| Error::io(path, e))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let dir = canon.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = resolve(v, Some(&dir), seen)?;
    seen.remove(&canon);
    Ok(out)
}

/// Merge includes (in order) under the document's own keys and anchor
/// relative pool paths at `dir`.
fn resolve(mut v: Value, dir: Option<&Path>, seen: &mut BTreeSet<PathBuf>) -> Result<Value> {
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    let includes = match obj.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|i| match i {
                Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::Config(format!("include must be a string or list, got {other}"))),
    };
    if let (Some(dir), Some(Value::Object(pools))) = (dir, obj.get_mut("pools")) {
        for p in pools.values_mut() {
            if let Value::String(s) = p {
                if Path::new(s.as_str()).is_relative() {
                    *s = dir.join(s.as_str()).to_string_lossy().into_owned();
                }
            }
        }
    }
    let mut base = Value::Object(Default::default());
    for inc in includes {
        let layer = if let Some(name) = inc.strip_prefix(PRESET_PREFIX) {
            serde_json::to_value(RunConfig::preset(name)?).expect("config serializes")
        } else {
            let dir = dir.ok_or_else(|| {
                Error::Config(format!("cannot include file {inc:?} from an in-memory config"))
            })?;
            load_value(&dir.join(&inc), seen)?
        };
        merge(&mut base, layer);
    }
    merge(&mut base, v);
    Ok(base)
}

/// Deep merge of objects; anything else in `top` replaces `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}
