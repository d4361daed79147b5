//! Acoustic-condition simulation over a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use bgflow_core::augment::{sample_augmentation, AugmentationPools, PoolEntry};
use bgflow_core::seed::{derive_seed, stream_rng};
use bgflow_core::signal::wav::write_wav;

use crate::config::RunConfig;
use crate::data::load_wave;
use crate::manifest::{write_jsonl, Manifest, ManifestRecord, PoolRecord};
use crate::{Error, Result};

const SIM_STREAM: u64 = 0x51;

fn load_pool(path: Option<&PathBuf>, needed: bool, what: &str, sample_rate: u32) -> Result<Vec<PoolEntry>> {
    let Some(path) = path else {
        if needed {
            return Err(Error::Config(format!(
                "pools.{what} is not set but the augmentation config can draw it"
            )));
        }
        return Ok(Vec::new());
    };
    let m = Manifest::<PoolRecord>::read(path)?;
    m.records
        .iter()
        .map(|r| {
            Ok(PoolEntry {
                id: r.id.clone(),
                speaker: r.speaker.clone(),
                audio: load_wave(&m.resolve(&r.audio), sample_rate)?,
            })
        })
        .collect()
}

pub fn load_pools(cfg: &RunConfig) -> Result<AugmentationPools> {
    let sr = cfg.mel.sample_rate;
    let a = &cfg.augmentation;
    Ok(AugmentationPools {
        noise: load_pool(cfg.pools.noise.as_ref(), a.p_noise > 0.0, "noise", sr)?,
        rir: load_pool(cfg.pools.rir.as_ref(), a.p_reverb > 0.0, "rir", sr)?,
        interferers: load_pool(cfg.pools.interferers.as_ref(), a.p_interf > 0.0, "interferers", sr)?,
    })
}

/// Write a clean/augmented WAV pair per record plus `manifest.jsonl`.
/// Record `i` draws from its own stream of `seed`, so the output does not
/// depend on processing order.
pub fn simulate(cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64) -> Result<PathBuf> {
    let input = Manifest::<ManifestRecord>::read(manifest)?;
    let pools = load_pools(cfg)?;
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let sr = cfg.mel.sample_rate;
    let mut records = Vec::with_capacity(input.records.len());
    for (i, r) in input.records.iter().enumerate() {
        let clean = load_wave(&input.resolve(&r.audio), sr)?;
        let mut rng = stream_rng(derive_seed(seed, i as u64), SIM_STREAM);
        let outcome = sample_augmentation(&clean, &r.speaker, &cfg.augmentation, &pools, &mut rng)?;
        let clean_rel = PathBuf::from(format!("wav/{}.clean.wav", r.id));
        let aug_rel = PathBuf::from(format!("wav/{}.aug.wav", r.id));
        for (rel, w) in [(&clean_rel, &outcome.clean), (&aug_rel, &outcome.augmented)] {
            let p = out.join(rel);
            write_wav(&p, w).map_err(|e| match e {
                bgflow_core::Error::Io(io) => Error::io(&p, io),
                other => other.into(),
            })?;
        }
        records.push(ManifestRecord {
            id: r.id.clone(),
            audio: aug_rel,
            text: r.text.clone(),
            speaker: r.speaker.clone(),
            durations: r.durations.clone(),
            clean_audio: Some(clean_rel),
            condition: Some(outcome.condition),
            snr_db: outcome.snr_db,
            source_ids: Some(outcome.source_ids),
        });
    }
    let path = out.join("manifest.jsonl");
    write_jsonl(&path, &records)?;
    Ok(path)
}
