//! Scoring generated audio against simulated ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bgflow_core::augment::Condition;
use bgflow_core::evaluate::{build_report, EvalContext, EvalPair, EvalReport, EvalSignal, ReferenceEmbedder, ReferenceKind};
use bgflow_core::flowmatch::ControlSignal;
use bgflow_core::signal::{mel_read, MelExtractor};

use crate::config::RunConfig;
use crate::data::load_wave;
use crate::manifest::{Manifest, ManifestRecord};
use crate::{Error, Result};

fn load_signal(path: &Path, sample_rate: u32) -> Result<EvalSignal> {
    if path.extension().is_some_and(|e| e == "mel") {
        Ok(EvalSignal::Mel(mel_read(path)?))
    } else {
        Ok(EvalSignal::Wave(load_wave(path, sample_rate)?))
    }
}

/// Generated items as `(id, path)`: either a manifest, or a directory of
/// `<id>.wav` / `<id>.mel` files.
fn generated_items(generated: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !generated.is_dir() {
        let m = Manifest::<ManifestRecord>::read(generated)?;
        return Ok(m.records.iter().map(|r| (r.id.clone(), m.resolve(&r.audio))).collect());
    }
    let mut items = Vec::new();
    for entry in fs::read_dir(generated).map_err(|e| Error::io(generated, e))? {
        let path = entry.map_err(|e| Error::io(generated, e))?.path();
        let known = path.extension().is_some_and(|e| e == "wav" || e == "mel");
        if let (true, Some(stem)) = (known, path.file_stem().and_then(|s| s.to_str())) {
            items.push((stem.to_string(), path.clone()));
        }
    }
    items.sort();
    if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::manifest(generated, format!("both .wav and .mel given for {:?}", w[0].0)));
    }
    if items.is_empty() {
        return Err(Error::manifest(generated, "no .wav or .mel files"));
    }
    Ok(items)
}

/// Write `pairs.jsonl`, `summary.json` and `tables.txt` into `out`.
pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let put = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put("pairs.jsonl", report.pairs_jsonl())?;
    put(
        "summary.json",
        serde_json::to_string_pretty(&report.summary_json()).expect("json") + "\n",
    )?;
    put(
        "tables.txt",
        format!("{}\n{}", report.condition_table(), report.snr_table()),
    )
}

/// Pair generated and reference records by id. The reference side comes
/// from a simulated manifest: its clean twin for removal, its augmented
/// audio for preservation.
pub fn evaluate(
    cfg: &RunConfig,
    generated: &Path,
    reference: &Path,
    task: ControlSignal,
    bucket_edges: &[f64],
) -> Result<EvalReport> {
    let gen = generated_items(generated)?;
    let refs = Manifest::<ManifestRecord>::read(reference)?;
    let by_id: BTreeMap<&str, &ManifestRecord> = refs.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let gen_ids: BTreeMap<&str, ()> = gen.iter().map(|(id, _)| (id.as_str(), ())).collect();
    let mut unmatched: Vec<String> = gen
        .iter()
        .filter(|(id, _)| !by_id.contains_key(id.as_str()))
        .map(|(id, _)| format!("{id} (generated only)"))
        .collect();
    unmatched.extend(
        refs.records
            .iter()
            .filter(|r| !gen_ids.contains_key(r.id.as_str()))
            .map(|r| format!("{} (reference only)", r.id)),
    );
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedIds(unmatched));
    }

    let sr = cfg.mel.sample_rate;
    let mut pairs = Vec::with_capacity(gen.len());
    for (id, audio) in &gen {
        let r = by_id[id.as_str()];
        let condition = r.condition.unwrap_or(Condition::Clean);
        let (ref_path, kind) = match task {
            ControlSignal::Removal => (r.clean_audio.as_ref().unwrap_or(&r.audio), ReferenceKind::Clean),
            ControlSignal::Preservation => (&r.audio, ReferenceKind::Noisy),
        };
        if task == ControlSignal::Removal && r.clean_audio.is_none() && condition != Condition::Clean {
            return Err(Error::manifest(
                &refs.path,
                format!("record {:?} ({condition}) has no clean_audio for the removal task", r.id),
            ));
        }
        pairs.push(EvalPair {
            id: id.clone(),
            generated: load_signal(audio, sr)?,
            reference: load_signal(&refs.resolve(ref_path), sr)?,
            reference_kind: kind,
            task,
            condition,
            snr_db: r.snr_db,
        });
    }
    let extractor = MelExtractor::new(cfg.mel.clone())?;
    let embedder = ReferenceEmbedder::new(extractor.clone());
    let ctx = EvalContext {
        extractor: &extractor,
        embedder: &embedder,
        vocoder_iters: cfg.evaluation.vocoder_iters,
        vocoder_seed: cfg.evaluation.vocoder_seed,
    };
    Ok(build_report(&pairs, bucket_edges, &ctx)?)
}
