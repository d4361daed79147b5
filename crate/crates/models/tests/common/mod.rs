#![allow(dead_code)]

use bgflow_core::augment::{sample_augmentation, AugmentationConfig, AugmentationPools, PoolEntry};
use bgflow_core::seed::stream_rng;
use bgflow_core::signal::{MelConfig, MelExtractor};
use bgflow_core::toyspeech::{synthesize_noise, toy_corpus, ToyUtterance};
use bgflow_models::duration::expand_ids;
use bgflow_models::norm::MelNorm;
use bgflow_models::train::{AcousticExample, DurationExample};

pub fn corpus(n: usize, seed: u64) -> Vec<ToyUtterance> {
    toy_corpus(n, 256, 16000, seed).unwrap()
}

/// Normalized clean/noisy mel pairs; `p_noise` of them get stationary noise.
pub fn acoustic_examples(corpus: &[ToyUtterance], p_noise: f64, seed: u64) -> (Vec<AcousticExample>, MelNorm) {
    let ext = MelExtractor::new(MelConfig::default()).unwrap();
    let pools = AugmentationPools {
        noise: (0..3)
            .map(|k| PoolEntry {
                id: format!("noise{k}"),
                speaker: None,
                audio: synthesize_noise(k, 32000, 16000, 100 + k as u64),
            })
            .collect(),
        ..Default::default()
    };
    let cfg = AugmentationConfig {
        p_clean: 1.0 - p_noise,
        p_noise,
        p_reverb: 0.0,
        p_interf: 0.0,
        ..Default::default()
    };
    let mut rng = stream_rng(seed, 0);
    let mut raw = Vec::new();
    for u in corpus {
        let out = sample_augmentation(&u.audio, &u.speaker.id, &cfg, &pools, &mut rng).unwrap();
        let clean = ext.extract(&out.clean).unwrap().into_frames();
        let augmented = ext.extract(&out.augmented).unwrap().into_frames();
        let frame_tokens = expand_ids(&u.ids, &u.durations).unwrap();
        assert_eq!(frame_tokens.len(), clean.nrows());
        raw.push(AcousticExample {
            id: u.id.clone(),
            clean,
            augmented,
            frame_tokens,
        });
    }
    let norm = MelNorm::fit(raw.iter().map(|e| &e.clean)).unwrap();
    for e in &mut raw {
        e.clean = norm.normalize(&e.clean);
        e.augmented = norm.normalize(&e.augmented);
    }
    (raw, norm)
}

pub fn duration_examples(corpus: &[ToyUtterance]) -> Vec<DurationExample> {
    corpus
        .iter()
        .map(|u| DurationExample {
            id: u.id.clone(),
            ids: u.ids.clone(),
            durations: u.durations.clone(),
        })
        .collect()
}
