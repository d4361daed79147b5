use bgflow_core::augment::{
    mix_at_snr, sample_augmentation, snr_db, AugmentationConfig, AugmentationPools, Condition, PoolEntry,
};
use bgflow_core::seed::stream_rng;
use bgflow_core::signal::Waveform;
use bgflow_core::toyspeech::{synthesize_noise, synthesize_rir};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn recomputed_snr_matches_request() {
    let mut rng = stream_rng(11, 0);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = 400 + (i % 7) * 50;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let req = rng.random_range(-5.0..=10.0);
        let s = Waveform::new(s, 16000).unwrap();
        let v = Waveform::new(v, 16000).unwrap();
        let (mixed, scaled) = mix_at_snr(&s, &v, req).unwrap();
        let err = (snr_db(s.samples(), scaled.samples()) - req).abs();
        worst = worst.max(err);
        // the mixture is exactly signal + scaled noise
        for ((m, a), b) in mixed.samples().iter().zip(s.samples()).zip(scaled.samples()) {
            assert_eq!(*m, a + b);
        }
    }
    assert!(worst < 1e-6, "worst SNR error {worst}");
}

fn pools() -> AugmentationPools {
    let noise = (0..3)
        .map(|k| PoolEntry {
            id: format!("noise{k}"),
            speaker: None,
            audio: synthesize_noise(k, 4000, 16000, k as u64),
        })
        .collect();
    let rir = vec![PoolEntry {
        id: "rir0".into(),
        speaker: None,
        audio: synthesize_rir(0.2, 16000, 5),
    }];
    let interferers = ["a", "b"]
        .iter()
        .enumerate()
        .map(|(k, s)| PoolEntry {
            id: format!("utt_{s}"),
            speaker: Some(s.to_string()),
            audio: synthesize_noise(2, 3000, 16000, 100 + k as u64),
        })
        .collect();
    AugmentationPools { noise, rir, interferers }
}

#[test]
fn condition_draws_follow_configured_probabilities() {
    let cfg = AugmentationConfig::default();
    let mut rng = stream_rng(2024, 0);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let c = cfg.draw_condition(&mut rng);
        counts[Condition::ALL.iter().position(|x| *x == c).unwrap()] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(cfg.probabilities())
        .map(|(&o, p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}, counts {counts:?}");
}

#[test]
fn sampled_outcomes_are_consistent() {
    let cfg = AugmentationConfig::default();
    let pools = pools();
    let clean = synthesize_noise(0, 2000, 16000, 77);
    let mut rng = stream_rng(5, 0);
    for _ in 0..200 {
        let out = sample_augmentation(&clean, "a", &cfg, &pools, &mut rng).unwrap();
        assert_eq!(out.augmented.len(), clean.len());
        assert_eq!(out.condition.has_snr(), out.snr_db.is_some());
        match out.condition {
            Condition::Clean => assert_eq!(out.augmented, clean),
            Condition::Noise => assert!((-5.0..=10.0).contains(&out.snr_db.unwrap())),
            Condition::Interference => {
                assert!((1.0..=10.0).contains(&out.snr_db.unwrap()));
                assert_eq!(out.source_ids, vec!["utt_b".to_string()]);
            }
            Condition::Reverb => assert_eq!(out.source_ids, vec!["rir0".to_string()]),
        }
    }
}

#[test]
fn clean_only_config_is_identity() {
    let cfg = AugmentationConfig::clean_only();
    let clean = synthesize_noise(1, 1000, 16000, 3);
    let mut rng = stream_rng(1, 0);
    let out = sample_augmentation(&clean, "a", &cfg, &AugmentationPools::default(), &mut rng).unwrap();
    assert_eq!(out.augmented, clean);
}
