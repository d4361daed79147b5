//! Synthetic toy corpus with augmentation pools, laid out like a real dataset.

use std::fs;
use std::path::{Path, PathBuf};

use bgflow_core::signal::wav::write_wav;
use bgflow_core::toyspeech::{synthesize_noise, synthesize_rir, toy_corpus};
use serde_json::json;

use crate::manifest::{write_jsonl, ManifestRecord, PoolRecord};
use crate::{Error, Result};

pub const TOY_SAMPLE_RATE: u32 = 16_000;
pub const TOY_HOP: usize = 256;

const N_INTERFERERS: usize = 8;
const RT60S: [f64; 3] = [0.3, 0.5, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusPaths {
    pub manifest: PathBuf,
    pub config: PathBuf,
}

fn write(path: &Path, w: &bgflow_core::signal::Waveform) -> Result<()> {
    write_wav(path, w).map_err(|e| match e {
        bgflow_core::Error::Io(io) => Error::io(path, io),
        other => other.into(),
    })
}

/// Write `n` toy utterances, noise/RIR/interferer pools and a config that
/// layers the pools on the toy preset.
pub fn write_toy_corpus(out: &Path, n: usize, seed: u64) -> Result<ToyCorpusPaths> {
    if n == 0 {
        return Err(Error::Usage("corpus size must be at least 1".into()));
    }
    for sub in ["wav", "pools/noise", "pools/rir", "pools/interferers"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(n);
    for u in toy_corpus(n, TOY_HOP, TOY_SAMPLE_RATE, seed)? {
        let rel = PathBuf::from(format!("wav/{}.wav", u.id));
        write(&out.join(&rel), &u.audio)?;
        records.push(ManifestRecord {
            id: u.id,
            audio: rel,
            text: u.text,
            speaker: u.speaker.id,
            durations: Some(u.durations),
            clean_audio: None,
            condition: None,
            snr_db: None,
            source_ids: None,
        });
    }
    let manifest = out.join("manifest.jsonl");
    write_jsonl(&manifest, &records)?;

    let mut noise = Vec::new();
    for k in 0..3 {
        let rel = PathBuf::from(format!("noise/noise{k}.wav"));
        let w = synthesize_noise(k, 2 * TOY_SAMPLE_RATE as usize, TOY_SAMPLE_RATE, seed.wrapping_add(100 + k as u64));
        write(&out.join("pools").join(&rel), &w)?;
        noise.push(PoolRecord {
            id: format!("noise{k}"),
            audio: rel,
            speaker: None,
        });
    }
    let mut rir = Vec::new();
    for (k, rt60) in RT60S.iter().enumerate() {
        let rel = PathBuf::from(format!("rir/rir{k}.wav"));
        write(
            &out.join("pools").join(&rel),
            &synthesize_rir(*rt60, TOY_SAMPLE_RATE, seed.wrapping_add(200 + k as u64)),
        )?;
        rir.push(PoolRecord {
            id: format!("rir{k}"),
            audio: rel,
            speaker: None,
        });
    }
    let mut interferers = Vec::new();
    for u in toy_corpus(N_INTERFERERS, TOY_HOP, TOY_SAMPLE_RATE, seed.wrapping_add(300))? {
        let id = format!("interf_{}", u.id);
        let rel = PathBuf::from(format!("interferers/{id}.wav"));
        write(&out.join("pools").join(&rel), &u.audio)?;
        interferers.push(PoolRecord {
            id,
            audio: rel,
            speaker: Some(u.speaker.id),
        });
    }
    write_jsonl(out.join("pools/noise.jsonl"), &noise)?;
    write_jsonl(out.join("pools/rir.jsonl"), &rir)?;
    write_jsonl(out.join("pools/interferers.jsonl"), &interferers)?;

    let config = out.join("config.json");
    let doc = json!({
        "include": ["preset:toy"],
        "pools": {
            "noise": "pools/noise.jsonl",
            "rir": "pools/rir.jsonl",
            "interferers": "pools/interferers.jsonl"
        }
    });
    fs::write(&config, serde_json::to_string_pretty(&doc).expect("json") + "\n").map_err(|e| Error::io(&config, e))?;
    Ok(ToyCorpusPaths { manifest, config })
}
