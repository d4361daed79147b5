//! Objective metrics: mel cepstral distortion, speaker similarity and the
//! per-condition / per-SNR report.

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI, SQRT_2};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::augment::Condition;
use crate::error::{Error, Result};
use crate::flowmatch::ControlSignal;
use crate::signal::{griffin_lim_vocode, MelExtractor, MelSpectrogram, Waveform};

/// `10·√2 / ln 10`, the dB scaling of the cepstral Euclidean distance.
pub const MCD_SCALE: f64 = 10.0 * SQRT_2 / LN_10;
/// Cepstral coefficients compared by MCD (excluding the 0th).
pub const MCD_ORDER: usize = 13;

/// Orthonormal DCT-II of every log-mel frame, keeping coefficients
/// `1..=order`.
pub fn mel_cepstrum(mel: ArrayView2<f32>, order: usize) -> Array2<f64> {
    let n = mel.ncols();
    let keep = order.min(n.saturating_sub(1));
    let mut out = Array2::zeros((mel.nrows(), keep));
    let scale = (2.0 / n as f64).sqrt();
    for (t, row) in mel.rows().into_iter().enumerate() {
        for k in 1..=keep {
            let mut acc = 0.0;
            for (j, &v) in row.iter().enumerate() {
                acc += v as f64 * (PI * k as f64 * (2 * j + 1) as f64 / (2 * n) as f64).cos();
            }
            out[[t, k - 1]] = scale * acc;
        }
    }
    out
}

/// Frame-averaged `MCD_SCALE · ‖c − c'‖` over index-aligned frames. The
/// generated sequence is truncated, or padded by repeating its last frame,
/// to the reference length.
pub fn mcd(generated: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    if generated.nrows() == 0 || reference.nrows() == 0 {
        return Err(Error::InvalidArgument("mcd needs non-empty cepstra".into()));
    }
    if generated.ncols() != reference.ncols() {
        return Err(Error::shape(reference.ncols(), generated.ncols()));
    }
    let last = generated.nrows() - 1;
    let mut total = 0.0;
    for (t, r) in reference.rows().into_iter().enumerate() {
        let g = generated.row(t.min(last));
        let d2: f64 = g.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += d2.sqrt();
    }
    Ok(MCD_SCALE * total / reference.nrows() as f64)
}

/// MCD between two log-mel spectrograms.
pub fn mcd_from_mels(generated: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    if generated.n_bins() != reference.n_bins() {
        return Err(Error::shape(reference.n_bins(), generated.n_bins()));
    }
    mcd(
        mel_cepstrum(generated.frames().view(), MCD_ORDER).view(),
        mel_cepstrum(reference.frames().view(), MCD_ORDER).view(),
    )
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn speaker_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that maps audio to a fixed-size speaker embedding.
pub trait SpeakerEmbedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Dependency-free spectral-statistics embedder: long-term average
/// spectrum shape, F0 statistics and log-energy moments, unit-normalized.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    extractor: MelExtractor,
}

const MIN_EMBED_SECS: f64 = 0.5;
const F0_MIN: f64 = 60.0;
const F0_MAX: f64 = 400.0;
const F0_WEIGHT: f64 = 4.0;
const ENERGY_WEIGHT: f64 = 0.5;

impl ReferenceEmbedder {
    pub fn new(extractor: MelExtractor) -> Self {
        Self { extractor }
    }

    pub fn dim(&self) -> usize {
        self.extractor.config().n_mels + 3 + 2
    }
}

impl SpeakerEmbedder for ReferenceEmbedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.duration_secs() < MIN_EMBED_SECS {
            return Err(Error::InvalidArgument(format!(
                "speaker embedding needs at least {MIN_EMBED_SECS} s, got {:.3} s",
                w.duration_secs()
            )));
        }
        let mel = self.extractor.extract(w)?;
        let frames = mel.frames();
        let n_bins = mel.n_bins();
        // frame energies in the log domain; active frames within 40 dB of the loudest
        let energies: Vec<f64> = frames
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| (v as f64).exp()).sum::<f64>().max(1e-10).ln())
            .collect();
        let loudest = energies.iter().cloned().fold(f64::MIN, f64::max);
        let active: Vec<usize> = (0..energies.len())
            .filter(|&t| energies[t] > loudest - 40.0 / 8.686)
            .collect();

        let mut ltas = vec![0.0; n_bins];
        for &t in &active {
            for (b, v) in frames.row(t).iter().enumerate() {
                ltas[b] += *v as f64;
            }
        }
        for v in ltas.iter_mut() {
            *v /= active.len() as f64;
        }
        let mean = ltas.iter().sum::<f64>() / n_bins as f64;
        let mut emb: Vec<f64> = ltas.iter().map(|v| (v - mean) / n_bins as f64 * 10.0).collect();

        let f0s = f0_track(w);
        let voiced: Vec<f64> = f0s.iter().flatten().map(|f| f.ln()).collect();
        let voiced_frac = voiced.len() as f64 / f0s.len().max(1) as f64;
        let (f0_mean, f0_std) = mean_std(&voiced);
        emb.push(F0_WEIGHT * if voiced.is_empty() { 0.0 } else { f0_mean - 150f64.ln() });
        emb.push(F0_WEIGHT * f0_std);
        emb.push(voiced_frac - 0.5);

        let act_e: Vec<f64> = active.iter().map(|&t| energies[t]).collect();
        let (_, e_std) = mean_std(&act_e);
        let skew = if e_std > 0.0 {
            let m = act_e.iter().sum::<f64>() / act_e.len() as f64;
            act_e.iter().map(|e| ((e - m) / e_std).powi(3)).sum::<f64>() / act_e.len() as f64
        } else {
            0.0
        };
        emb.push(ENERGY_WEIGHT * e_std);
        emb.push(ENERGY_WEIGHT * skew.clamp(-5.0, 5.0));

        let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("embedding has zero norm (silent input?)".into()));
        }
        Ok(emb.into_iter().map(|v| v / norm).collect())
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}

/// Autocorrelation F0 per 40 ms frame (10 ms hop); `None` when unvoiced.
pub fn f0_track(w: &Waveform) -> Vec<Option<f64>> {
    let sr = w.sample_rate() as f64;
    let frame = (0.04 * sr) as usize;
    let hop = (0.01 * sr) as usize;
    let lag_min = (sr / F0_MAX).floor() as usize;
    let lag_max = (sr / F0_MIN).ceil() as usize;
    let x = w.samples();
    let mut out = Vec::new();
    let mut start = 0;
    while start + frame + lag_max <= x.len() {
        let seg = &x[start..start + frame];
        let e0: f64 = seg.iter().map(|v| v * v).sum();
        if e0 < 1e-6 {
            out.push(None);
            start += hop;
            continue;
        }
        let mut best = (0usize, 0.0f64);
        for lag in lag_min..=lag_max {
            let other = &x[start + lag..start + lag + frame];
            let num: f64 = seg.iter().zip(other).map(|(a, b)| a * b).sum();
            let e1: f64 = other.iter().map(|v| v * v).sum();
            let r = num / (e0 * e1).sqrt().max(1e-12);
            if r > best.1 {
                best = (lag, r);
            }
        }
        out.push((best.1 > 0.6).then(|| sr / best.0 as f64));
        start += hop;
    }
    out
}

/// Generated or reference audio, in whichever form is at hand.
#[derive(Debug, Clone)]
pub enum EvalSignal {
    Mel(MelSpectrogram),
    Wave(Waveform),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Clean,
    Noisy,
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub generated: EvalSignal,
    pub reference: EvalSignal,
    pub reference_kind: ReferenceKind,
    pub task: ControlSignal,
    pub condition: Condition,
    pub snr_db: Option<f64>,
}

/// Tools needed to turn an [`EvalSignal`] into mels and embeddings.
pub struct EvalContext<'a> {
    pub extractor: &'a MelExtractor,
    pub embedder: &'a dyn SpeakerEmbedder,
    pub vocoder_iters: usize,
    pub vocoder_seed: u64,
}

impl EvalContext<'_> {
    fn mel(&self, s: &EvalSignal) -> Result<MelSpectrogram> {
        match s {
            EvalSignal::Mel(m) => Ok(m.clone()),
            EvalSignal::Wave(w) => self.extractor.extract(w),
        }
    }

    fn wave(&self, s: &EvalSignal) -> Result<Waveform> {
        match s {
            EvalSignal::Wave(w) => Ok(w.clone()),
            EvalSignal::Mel(m) => griffin_lim_vocode(self.extractor, m, self.vocoder_iters, self.vocoder_seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStat {
    pub mean: f64,
    pub count: usize,
}

impl MeanStat {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| MeanStat {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub task: ControlSignal,
    pub condition: Condition,
    pub snr_db: Option<f64>,
    pub mcd_db: f64,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub count: usize,
    pub mcd_db: Option<MeanStat>,
    pub sim: Option<MeanStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrBucket {
    pub lo_db: f64,
    pub hi_db: f64,
    pub count: usize,
    pub sim: Option<MeanStat>,
    pub mcd_db: Option<MeanStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub per_condition: Vec<ConditionSummary>,
    pub snr_buckets: Vec<SnrBucket>,
    /// Pairs without an SNR or outside the bucket edges.
    pub unbucketed: usize,
}

fn check_pair(p: &EvalPair) -> Result<()> {
    let ok = match (p.task, p.reference_kind) {
        (ControlSignal::Removal, ReferenceKind::Clean) => true,
        (ControlSignal::Preservation, ReferenceKind::Noisy) => true,
        // a clean prompt's noisy ground truth is the clean one
        (ControlSignal::Preservation, ReferenceKind::Clean) => p.condition == Condition::Clean,
        (ControlSignal::Removal, ReferenceKind::Noisy) => p.condition == Condition::Clean,
    };
    if !ok {
        return Err(Error::InvalidPair(format!(
            "pair {}: {} task under {} needs a {} reference, got {:?}",
            p.id,
            p.task,
            p.condition,
            if p.task == ControlSignal::Removal { "clean" } else { "noisy" },
            p.reference_kind
        )));
    }
    if p.condition.has_snr() != p.snr_db.is_some() {
        return Err(Error::InvalidPair(format!(
            "pair {}: snr must be present exactly for noise and interference",
            p.id
        )));
    }
    Ok(())
}

pub fn validate_bucket_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(format!(
            "bucket edges must be at least two strictly increasing values, got {edges:?}"
        )));
    }
    Ok(())
}

/// Score each pair in input order and aggregate per condition and per SNR
/// bucket. Buckets are `[e_i, e_{i+1})`, the last one closed.
pub fn build_report(pairs: &[EvalPair], bucket_edges: &[f64], ctx: &EvalContext) -> Result<EvalReport> {
    validate_bucket_edges(bucket_edges)?;
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        check_pair(p)?;
        let gen_mel = ctx.mel(&p.generated)?;
        let ref_mel = ctx.mel(&p.reference)?;
        let mcd_db = mcd_from_mels(&gen_mel, &ref_mel)?;
        let gen_w = ctx.wave(&p.generated)?;
        let ref_w = ctx.wave(&p.reference)?;
        let sim = match (ctx.embedder.embed(&gen_w), ctx.embedder.embed(&ref_w)) {
            (Ok(a), Ok(b)) => speaker_similarity(&a, &b).ok(),
            _ => None,
        };
        scored.push(PairMetrics {
            id: p.id.clone(),
            task: p.task,
            condition: p.condition,
            snr_db: p.snr_db,
            mcd_db,
            sim,
        });
    }
    Ok(summarize(scored, bucket_edges))
}

/// Aggregate already-scored pairs.
pub fn summarize(pairs: Vec<PairMetrics>, bucket_edges: &[f64]) -> EvalReport {
    let mut per_condition = Vec::new();
    for c in Condition::ALL {
        let sel: Vec<&PairMetrics> = pairs.iter().filter(|p| p.condition == c).collect();
        if sel.is_empty() {
            continue;
        }
        let mcds: Vec<f64> = sel.iter().map(|p| p.mcd_db).collect();
        let sims: Vec<f64> = sel.iter().filter_map(|p| p.sim).collect();
        per_condition.push(ConditionSummary {
            condition: c,
            count: sel.len(),
            mcd_db: MeanStat::of(&mcds),
            sim: MeanStat::of(&sims),
        });
    }
    let n_buckets = bucket_edges.len() - 1;
    let mut bucket_sims: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    let mut bucket_mcds: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    let mut counts = vec![0usize; n_buckets];
    let mut unbucketed = 0;
    for p in &pairs {
        match p.snr_db.and_then(|s| bucket_index(bucket_edges, s)) {
            Some(b) => {
                counts[b] += 1;
                bucket_mcds[b].push(p.mcd_db);
                if let Some(s) = p.sim {
                    bucket_sims[b].push(s);
                }
            }
            None => unbucketed += 1,
        }
    }
    let snr_buckets = (0..n_buckets)
        .map(|b| SnrBucket {
            lo_db: bucket_edges[b],
            hi_db: bucket_edges[b + 1],
            count: counts[b],
            sim: MeanStat::of(&bucket_sims[b]),
            mcd_db: MeanStat::of(&bucket_mcds[b]),
        })
        .collect();
    EvalReport {
        pairs,
        per_condition,
        snr_buckets,
        unbucketed,
    }
}

fn bucket_index(edges: &[f64], snr: f64) -> Option<usize> {
    let last = edges.len() - 2;
    (0..=last).find(|&b| snr >= edges[b] && (snr < edges[b + 1] || (b == last && snr <= edges[b + 1])))
}

fn fmt_opt(m: &Option<MeanStat>) -> String {
    m.map(|m| format!("{:.4}", m.mean)).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// One JSON object per pair.
    pub fn pairs_jsonl(&self) -> String {
        self.pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("metrics serialize") + "\n")
            .collect()
    }

    /// Everything except the per-pair records.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_pairs": self.pairs.len(),
            "per_condition": self.per_condition,
            "snr_buckets": self.snr_buckets,
            "unbucketed": self.unbucketed,
        })
    }

    pub fn condition_table(&self) -> String {
        let rows = self
            .per_condition
            .iter()
            .map(|c| {
                vec![
                    c.condition.to_string(),
                    c.count.to_string(),
                    fmt_opt(&c.sim),
                    fmt_opt(&c.mcd_db),
                ]
            })
            .collect::<Vec<_>>();
        format_table(&["condition", "n", "SIM", "MCD(dB)"], &rows)
    }

    pub fn snr_table(&self) -> String {
        let rows = self
            .snr_buckets
            .iter()
            .map(|b| {
                vec![
                    format!("[{}, {}]", b.lo_db, b.hi_db),
                    b.count.to_string(),
                    fmt_opt(&b.sim),
                    fmt_opt(&b.mcd_db),
                ]
            })
            .collect::<Vec<_>>();
        format_table(&["SNR bucket (dB)", "n", "SIM", "MCD(dB)"], &rows)
    }
}

/// Left-aligned text table with a rule under the header.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, cell) in r.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

/// Which per-condition statistic an ablation table reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMetric {
    Sim,
    McdDb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: String,
    pub spk_encoder: String,
    pub strategy: String,
    /// One cell per table column, in column order.
    pub cells: Vec<Option<MeanStat>>,
}

/// Rows keyed by (speaker encoder, strategy), columns by condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub metric: AblationMetric,
    pub columns: Vec<Condition>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn new(title: impl Into<String>, metric: AblationMetric, columns: Vec<Condition>) -> Self {
        Self {
            title: title.into(),
            metric,
            columns,
            rows: Vec::new(),
        }
    }

    /// Append a row whose cells are read from `report`'s per-condition summary.
    pub fn push(&mut self, id: &str, spk_encoder: &str, strategy: &str, report: &EvalReport) {
        let cells = self
            .columns
            .iter()
            .map(|c| {
                report
                    .per_condition
                    .iter()
                    .find(|s| s.condition == *c)
                    .and_then(|s| match self.metric {
                        AblationMetric::Sim => s.sim,
                        AblationMetric::McdDb => s.mcd_db,
                    })
            })
            .collect();
        self.rows.push(AblationRow {
            id: id.into(),
            spk_encoder: spk_encoder.into(),
            strategy: strategy.into(),
            cells,
        });
    }

    pub fn to_text(&self) -> String {
        let mut headers = vec!["ID".to_string(), "SpkEncoder".into(), "Strategy".into()];
        headers.extend(self.columns.iter().map(|c| c.to_string()));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![r.id.clone(), r.spk_encoder.clone(), r.strategy.clone()];
                v.extend(r.cells.iter().map(fmt_opt));
                v
            })
            .collect();
        let h: Vec<&str> = headers.iter().map(String::as_str).collect();
        format!("{}\n{}", self.title, format_table(&h, &rows))
    }
}

/// Convenience: per-condition counts, for callers that only need a histogram.
pub fn condition_histogram(conditions: impl IntoIterator<Item = Condition>) -> BTreeMap<Condition, usize> {
    let mut h = BTreeMap::new();
    for c in conditions {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}
