use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bgflow_cli::config::RunConfig;
use bgflow_cli::corpus::write_toy_corpus;
use bgflow_cli::evaluate::{evaluate, write_report};
use bgflow_cli::manifest::{Manifest, ManifestRecord};
use bgflow_cli::simulate::simulate;
use bgflow_cli::train::{read_loss_log, train_acoustic, TrainOptions};
use bgflow_cli::Error;
use bgflow_core::augment::Condition;
use bgflow_core::flowmatch::ControlSignal;
use bgflow_models::acoustic::{AcousticModelConfig, EncoderMode, Strategy};
use bgflow_models::checkpoint::Checkpoint;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    cfg: RunConfig,
    config: PathBuf,
    sim: PathBuf,
}

fn fixture(n: usize, seed: u64, overrides: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let paths = write_toy_corpus(&root.join("corpus"), n, seed).unwrap();
    let config = root.join("run.json");
    fs::write(&config, format!(r#"{{"include": "corpus/config.json"{overrides}}}"#)).unwrap();
    let cfg = RunConfig::load(&config).unwrap();
    let sim = simulate(&cfg, &paths.manifest, &root.join("sim"), cfg.seeds.simulate).unwrap();
    Fixture {
        _dir: dir,
        root,
        cfg,
        config,
        sim,
    }
}

fn bgflow(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bgflow"));
    cmd.args(args).env_remove("BGFLOW_CONFIG");
    if let Some(c) = config {
        cmd.env("BGFLOW_CONFIG", c);
    }
    cmd.output().unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("structured error on stderr");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn records(path: &Path) -> Manifest<ManifestRecord> {
    Manifest::read(path).unwrap()
}

#[test]
fn clean_only_simulation_copies_audio() {
    let fx = fixture(
        5,
        2,
        r#", "augmentation": {"p_clean": 1.0, "p_noise": 0.0, "p_reverb": 0.0, "p_interf": 0.0}"#,
    );
    let m = records(&fx.sim);
    for r in &m.records {
        assert_eq!(r.condition, Some(Condition::Clean));
        assert!(r.snr_db.is_none());
        let clean = fs::read(m.resolve(r.clean_audio.as_ref().unwrap())).unwrap();
        assert_eq!(clean, fs::read(m.resolve(&r.audio)).unwrap());
    }
}

#[test]
fn simulated_records_carry_snr_only_where_defined() {
    let fx = fixture(40, 5, "");
    let m = records(&fx.sim);
    let mut seen = std::collections::BTreeSet::new();
    for r in &m.records {
        let c = r.condition.unwrap();
        seen.insert(c);
        assert_eq!(r.snr_db.is_some(), c.has_snr(), "{}", r.id);
        assert_eq!(r.source_ids.as_ref().is_some_and(|s| !s.is_empty()), c != Condition::Clean);
    }
    assert_eq!(seen.len(), 4, "all conditions drawn over 40 records");
}

#[test]
fn identical_generated_and_reference_score_perfectly() {
    let fx = fixture(40, 5, "");
    let m = records(&fx.sim);
    let gen = fx.root.join("gen");
    fs::create_dir_all(&gen).unwrap();
    // one record per condition
    let mut picked = std::collections::BTreeMap::new();
    for r in &m.records {
        picked.entry(r.condition.unwrap()).or_insert(r);
    }
    let subset: Vec<ManifestRecord> = picked.values().map(|r| (*r).clone()).collect();
    let reference = fx.root.join("sim/subset.jsonl");
    bgflow_cli::manifest::write_jsonl(&reference, &subset).unwrap();
    for r in &subset {
        fs::copy(m.resolve(r.clean_audio.as_ref().unwrap()), gen.join(format!("{}.wav", r.id))).unwrap();
    }
    let report = evaluate(&fx.cfg, &gen, &reference, ControlSignal::Removal, &[-5.0, 0.0, 5.0, 10.0]).unwrap();
    assert_eq!(report.per_condition.len(), 4);
    for stats in &report.per_condition {
        assert_eq!(stats.count, 1);
        assert!(stats.mcd_db.unwrap().mean.abs() < 1e-9);
        assert!((stats.sim.unwrap().mean - 1.0).abs() < 1e-9);
    }
    assert_eq!(report.snr_buckets.len(), 3);
    let out = fx.root.join("eval");
    write_report(&report, &out).unwrap();
    let tables = fs::read_to_string(out.join("tables.txt")).unwrap();
    for c in Condition::ALL {
        assert!(tables.contains(c.as_str()), "{tables}");
    }
}

#[test]
fn unmatched_ids_are_listed() {
    let fx = fixture(4, 1, "");
    let m = records(&fx.sim);
    let gen = fx.root.join("gen");
    fs::create_dir_all(&gen).unwrap();
    let first = &m.records[0];
    fs::copy(m.resolve(&first.audio), gen.join(format!("{}.wav", first.id))).unwrap();
    fs::copy(m.resolve(&first.audio), gen.join("stray.wav")).unwrap();
    match evaluate(&fx.cfg, &gen, &fx.sim, ControlSignal::Preservation, &[0.0, 5.0]) {
        Err(Error::UnmatchedIds(ids)) => {
            assert!(ids.contains(&"stray (generated only)".to_string()), "{ids:?}");
            assert_eq!(ids.len(), 1 + m.records.len() - 1);
        }
        other => panic!("expected unmatched ids, got {other:?}"),
    }
}

#[test]
fn resume_reproduces_uninterrupted_losses() {
    let mut fx = fixture(6, 3, "");
    fx.cfg.acoustic_optimizer.epochs = 0;
    fx.cfg.acoustic_optimizer.max_steps = Some(6);
    let full = train_acoustic(&fx.cfg, &fx.sim, &TrainOptions::new(fx.root.join("full.ckpt"))).unwrap();
    assert_eq!(full.steps, 6);

    let mut first = fx.cfg.clone();
    first.acoustic_optimizer.max_steps = Some(3);
    let part = fx.root.join("part.ckpt");
    train_acoustic(&first, &fx.sim, &TrainOptions::new(&part)).unwrap();
    let resumed = train_acoustic(
        &fx.cfg,
        &fx.sim,
        &TrainOptions {
            resume: Some(part.clone()),
            ..TrainOptions::new(&part)
        },
    )
    .unwrap();
    assert_eq!(resumed.start_step, 3);
    assert_eq!(read_loss_log(&full.log).unwrap(), read_loss_log(&resumed.log).unwrap());
    assert_eq!(
        Checkpoint::load(&full.checkpoint).unwrap().params,
        Checkpoint::load(&resumed.checkpoint).unwrap().params
    );
}

#[test]
fn strategy_and_encoder_flags_reach_the_checkpoint() {
    let fx = fixture(4, 4, "");
    let out = fx.root.join("msd.ckpt");
    let run = bgflow(
        &[
            "train-acoustic",
            "--manifest",
            fx.sim.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "2",
            "--strategy",
            "msd",
            "--encoder-mode",
            "single",
        ],
        Some(&fx.config),
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let cfg: AcousticModelConfig = Checkpoint::load(&out).unwrap().config_as().unwrap();
    assert_eq!((cfg.strategy, cfg.encoder_mode), (Strategy::Msd, EncoderMode::Single));
    assert_eq!(
        AcousticModelConfig {
            strategy: Strategy::Cmsp,
            encoder_mode: EncoderMode::Dual,
            ..cfg
        },
        fx.cfg.acoustic_model
    );
}

#[test]
fn errors_are_structured() {
    let fx = fixture(3, 6, "");
    let bad = fx.root.join("bad.json");
    fs::write(&bad, r#"{"include": "corpus/config.json", "synthesis": {"alhpa": 0.5}}"#).unwrap();
    let out = bgflow(&["simulate", "--manifest", "x", "--out", "y"], Some(&bad));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));

    let out = bgflow(&["simulate", "--manifest", "missing.jsonl", "--out", "y"], Some(&fx.config));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "io");

    // a task is mandatory for synthesis
    let out = bgflow(
        &[
            "synthesize", "--acoustic", "a", "--duration", "d", "--prompt-wav", "p.wav",
            "--prompt-text", "hi", "--target-text", "yo", "--out", "o.wav",
        ],
        Some(&fx.config),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--task"));
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let fx = fixture(5, 7, "");
    let p = |rel: &str| fx.root.join(rel).to_string_lossy().into_owned();
    let sim = fx.sim.to_string_lossy().into_owned();
    let c = Some(fx.config.as_path());
    for (cmd, out) in [("train-acoustic", "ac.ckpt"), ("train-duration", "dur.ckpt")] {
        let run = bgflow(&[cmd, "--manifest", &sim, "--out", &p(out), "--steps", "10"], c);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        Checkpoint::load(fx.root.join(out)).unwrap();
    }
    let m = records(&fx.sim);
    let prompt = &m.records[0];
    let gen = fx.root.join("gen");
    for r in &m.records {
        let run = bgflow(
            &[
                "synthesize", "--acoustic", &p("ac.ckpt"), "--duration", &p("dur.ckpt"),
                "--prompt-wav", &m.resolve(&prompt.audio).to_string_lossy(), "--prompt-text", &prompt.text,
                "--target-text", &r.text, "--task", "removal", "--alpha", "0.5", "--n-steps", "4",
                "--out", &gen.join(format!("{}.wav", r.id)).to_string_lossy(),
            ],
            c,
        );
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let run = bgflow(
        &[
            "evaluate", "--generated", &gen.to_string_lossy(), "--reference", &sim, "--task", "removal",
            "--buckets=-5,0,5,10", "--out", &p("eval"),
        ],
        c,
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.root.join("eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_pairs"], 5);
}
