//! End-to-end inference, corpus evaluation, OA sweeps and ω histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{align_pair, oa_blend, OaGrid, Waveform, DEFAULT_ALIGN_TOLERANCE_S};
use crate::backends::{Backends, Enhancer, RecognitionRequest};
use crate::cache::{BackendIds, PqCache, PqRecord, WerCache, WerRecord};
use crate::error::{Error, Result};
use crate::features::{fbank, FbankConfig, FeatureCache, FeatureMatrix};
use crate::manifest::{Manifest, ManifestRecord};
use crate::model::BridgingNet;
use crate::supervision::{grid_error_counts, normalize_text, ErrorCount};
use crate::training::{select_omega, Strategy, TrainExample};

/// Loads the noisy waveform, enhances it and trims both to a common length.
pub fn load_pair(rec: &ManifestRecord, enhancer: &dyn Enhancer) -> Result<(Waveform, Waveform)> {
    let x = rec.load_noisy().map_err(|e| e.at_stage(&rec.utt_id, "load"))?;
    let y = enhancer.enhance(rec, &x).map_err(|e| e.at_stage(&rec.utt_id, "enhance"))?;
    align_pair(&x, &y, DEFAULT_ALIGN_TOLERANCE_S).map_err(|e| e.at_stage(&rec.utt_id, "align"))
}

/// Filterbanks of the aligned noisy and enhanced waveforms.
pub fn pair_features(x: &Waveform, y: &Waveform, cfg: &FbankConfig) -> Result<(FeatureMatrix, FeatureMatrix)> {
    Ok((fbank(x, cfg)?, fbank(y, cfg)?))
}

/// Like [`pair_features`] from a manifest record, consulting `cache` first.
/// The enhanced stream is keyed by the enhancer id.
pub fn utterance_features(
    rec: &ManifestRecord,
    enhancer: &dyn Enhancer,
    cfg: &FbankConfig,
    cache: Option<&FeatureCache>,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let enh_stream = format!("enh-{}", enhancer.id());
    if let Some(c) = cache {
        if let (Some(n), Some(e)) = (c.load(&rec.utt_id, "noisy", cfg), c.load(&rec.utt_id, &enh_stream, cfg)) {
            return Ok((n, e));
        }
    }
    let (x, y) = load_pair(rec, enhancer)?;
    let (n, e) = pair_features(&x, &y, cfg).map_err(|e| e.at_stage(&rec.utt_id, "features"))?;
    if let Some(c) = cache {
        c.store(&rec.utt_id, "noisy", cfg, &n)?;
        c.store(&rec.utt_id, &enh_stream, cfg, &e)?;
    }
    Ok((n, e))
}

/// How the blending coefficient is chosen for each utterance.
#[derive(Debug, Clone, Copy)]
pub enum OmegaPolicy<'a> {
    Model {
        net: &'a BridgingNet,
        strategy: Strategy,
        grid: &'a OaGrid,
        fbank: &'a FbankConfig,
    },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub omega: f64,
    pub blended: Waveform,
    pub hypothesis: String,
}

/// SE, bridging network, blend, ASR for one utterance. Errors name the
/// utterance and the failing stage.
pub fn infer_utterance(rec: &ManifestRecord, policy: &OmegaPolicy<'_>, backends: &Backends) -> Result<Inference> {
    let (x, y) = load_pair(rec, backends.enhancer.as_ref())?;
    let omega = choose_omega(rec, &x, &y, policy)?;
    let blended = oa_blend(&x, &y, omega).map_err(|e| e.at_stage(&rec.utt_id, "blend"))?;
    let req = RecognitionRequest {
        utt_id: &rec.utt_id,
        omega: Some(omega),
        audio: &blended,
    };
    let hypothesis = backends
        .recognizer
        .transcribe(&req)
        .map_err(|e| e.at_stage(&rec.utt_id, "transcribe"))?;
    Ok(Inference {
        omega,
        blended,
        hypothesis,
    })
}

/// SE, bridging network and coefficient selection, without recognition.
pub fn predict_omega(rec: &ManifestRecord, policy: &OmegaPolicy<'_>, enhancer: &dyn Enhancer) -> Result<f64> {
    match *policy {
        OmegaPolicy::Fixed(w) => check_fixed(w),
        OmegaPolicy::Model { .. } => {
            let (x, y) = load_pair(rec, enhancer)?;
            choose_omega(rec, &x, &y, policy)
        }
    }
}

fn check_fixed(w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fixed ω {w} outside [0, 1]")));
    }
    Ok(w)
}

fn choose_omega(rec: &ManifestRecord, x: &Waveform, y: &Waveform, policy: &OmegaPolicy<'_>) -> Result<f64> {
    match *policy {
        OmegaPolicy::Fixed(w) => check_fixed(w),
        OmegaPolicy::Model {
            net,
            strategy,
            grid,
            fbank,
        } => {
            let (n, e) = pair_features(x, y, fbank).map_err(|e| e.at_stage(&rec.utt_id, "features"))?;
            let out = net.forward(&n, &e).map_err(|e| e.at_stage(&rec.utt_id, "bridge"))?;
            select_omega(&out, strategy, grid).map_err(|e| e.at_stage(&rec.utt_id, "select"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utt_id: String,
    pub subset: String,
    pub omega: f64,
    pub errors: usize,
    pub ref_words: usize,
    pub wer: f64,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub utt_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerSummary {
    pub utterances: usize,
    pub errors: usize,
    pub ref_words: usize,
    /// Pooled WER in percent; `None` when no reference words were scored.
    pub wer_percent: Option<f64>,
}

impl WerSummary {
    fn add(&mut self, c: ErrorCount) {
        self.utterances += 1;
        self.errors += c.errors;
        self.ref_words += c.ref_words;
        self.wer_percent = (self.ref_words > 0).then(|| 100.0 * self.errors as f64 / self.ref_words as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by subset tag.
    pub subsets: BTreeMap<String, WerSummary>,
    pub overall: WerSummary,
    pub rows: Vec<EvalRow>,
    /// Utterances left out of the WER because a stage failed.
    pub failures: Vec<Failure>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>8} {:>8} {:>8}", "subset", "utts", "errors", "words", "WER%");
        let line = |s: &mut String, name: &str, w: &WerSummary| {
            let wer = w.wer_percent.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(s, "{name:<10} {:>6} {:>8} {:>8} {wer:>8}", w.utterances, w.errors, w.ref_words);
        };
        for (name, w) in &self.subsets {
            line(&mut s, name, w);
        }
        line(&mut s, "overall", &self.overall);
        if !self.failures.is_empty() {
            let _ = writeln!(s, "failed utterances: {}", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(s, "  {}: {}", f.utt_id, f.message);
            }
        }
        s
    }
}

/// Runs every record through the pipeline and pools WER per subset and
/// overall. Failed utterances are listed and excluded from the WER.
pub fn evaluate(manifest: &Manifest, policy: &OmegaPolicy<'_>, backends: &Backends, fingerprint: &str) -> EvalReport {
    let results: Vec<(&ManifestRecord, Result<(Inference, ErrorCount)>)> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let r = (|| {
                let reference = normalize_text(rec.transcript()?);
                if reference.is_empty() {
                    return Err(Error::Manifest(format!("utterance {} has an empty transcript", rec.utt_id)));
                }
                let inf = infer_utterance(rec, policy, backends)?;
                let count = ErrorCount::between(&reference, &normalize_text(&inf.hypothesis));
                Ok((inf, count))
            })();
            (rec, r)
        })
        .collect();

    let mut report = EvalReport {
        subsets: BTreeMap::new(),
        overall: WerSummary::default(),
        rows: Vec::new(),
        failures: Vec::new(),
        fingerprint: fingerprint.to_string(),
    };
    for (rec, r) in results {
        match r {
            Ok((inf, count)) => {
                let subset = rec.subset.to_string();
                report.subsets.entry(subset.clone()).or_default().add(count);
                report.overall.add(count);
                report.rows.push(EvalRow {
                    utt_id: rec.utt_id.clone(),
                    subset,
                    omega: inf.omega,
                    errors: count.errors,
                    ref_words: count.ref_words,
                    wer: count.errors as f64 / count.ref_words as f64,
                    hypothesis: inf.hypothesis,
                });
            }
            Err(e) => {
                log::warn!("{}: {e}", rec.utt_id);
                report.failures.push(Failure {
                    utt_id: rec.utt_id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    #[serde(flatten)]
    pub summary: WerSummary,
}

/// Pooled WER at every grid coefficient, one row per coefficient in
/// descending-ω order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub grid_hash: String,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<Failure>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>8} {:>8} {:>8}", "OA", "errors", "words", "WER%");
        for r in &self.rows {
            let wer = r.summary.wer_percent.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(s, "{:>6.2} {:>8} {:>8} {wer:>8}", r.omega, r.summary.errors, r.summary.ref_words);
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "failed utterances: {}", self.failures.len());
        }
        s
    }
}

/// Builds (or reuses from `cache`) every utterance's WER vector and pools the
/// errors per coefficient.
pub fn sweep(manifest: &Manifest, grid: &OaGrid, backends: &Backends, cache: Option<&WerCache>) -> SweepTable {
    let results: Vec<(&ManifestRecord, Result<Vec<ErrorCount>>)> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let r = grid_error_counts(rec, grid, backends.enhancer.as_ref(), backends.recognizer.as_ref(), cache);
            (rec, r)
        })
        .collect();
    let mut rows: Vec<SweepRow> = grid
        .descending()
        .into_iter()
        .map(|omega| SweepRow {
            omega,
            summary: WerSummary::default(),
        })
        .collect();
    let mut failures = Vec::new();
    for (rec, r) in results {
        match r {
            Ok(counts) => {
                for (row, c) in rows.iter_mut().zip(counts) {
                    row.summary.add(c);
                }
            }
            Err(e) => failures.push(Failure {
                utt_id: rec.utt_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    SweepTable {
        grid_hash: grid.fingerprint(),
        rows,
        failures,
    }
}

/// Where cached supervision comes from when assembling training examples.
#[derive(Clone, Copy)]
pub struct TargetSources<'a> {
    /// Quality targets and the id of the scorer that produced them.
    pub pq: Option<(&'a PqCache, &'a str)>,
    /// WER vectors, the recognizer id and the grid they were built on.
    pub wer: Option<(&'a WerCache, &'a str, &'a OaGrid)>,
}

/// Features plus cached targets for every record. Fails with
/// [`Error::MissingCache`] listing every utterance whose targets the
/// strategy needs but the caches lack.
pub fn gather_examples(
    manifest: &Manifest,
    strategy: Strategy,
    enhancer: &dyn Enhancer,
    fbank_cfg: &FbankConfig,
    feature_cache: Option<&FeatureCache>,
    sources: TargetSources<'_>,
) -> Result<Vec<TrainExample>> {
    let mut missing = Vec::new();
    let mut targets = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let pq_target = match sources.pq {
            Some((cache, scorer)) if strategy.needs_pq() => {
                cache.get(&PqRecord::cache_key(&rec.utt_id, scorer)).and_then(|r| r.target)
            }
            _ => None,
        };
        let wers = match sources.wer {
            Some((cache, asr, grid)) if strategy.needs_wers() => {
                let ids = BackendIds {
                    enhancer: enhancer.id().to_string(),
                    recognizer: asr.to_string(),
                };
                cache
                    .get(&WerRecord::cache_key(&rec.utt_id, &grid.fingerprint(), &ids))
                    .map(|r| r.values)
            }
            _ => None,
        };
        if (strategy.needs_pq() && pq_target.is_none()) || (strategy.needs_wers() && wers.is_none()) {
            missing.push(rec.utt_id.clone());
        }
        targets.push((pq_target, wers));
    }
    if !missing.is_empty() {
        return Err(Error::MissingCache(missing));
    }
    manifest
        .records
        .par_iter()
        .zip(targets)
        .map(|(rec, (pq_target, wers))| {
            let (noisy, enhanced) = utterance_features(rec, enhancer, fbank_cfg, feature_cache)?;
            Ok(TrainExample {
                utt_id: rec.utt_id.clone(),
                noisy,
                enhanced,
                pq_target,
                wers,
            })
        })
        .collect()
}

/// Counts of ω per uniform bin on [0, 1]; the last bin is closed on the right.
pub fn histogram(omegas: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut counts = vec![0; bins];
    for &w in omegas {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("ω {w} outside [0, 1]")));
        }
        let idx = ((w * bins as f64).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts)
}

/// Plain-text bar chart of histogram counts.
pub fn histogram_text(counts: &[usize]) -> String {
    let bins = counts.len();
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut s = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let lo = i as f64 / bins as f64;
        let hi = (i + 1) as f64 / bins as f64;
        let close = if i + 1 == bins { ']' } else { ')' };
        let bar = "#".repeat((40 * c).div_ceil(max));
        let _ = writeln!(s, "[{lo:.2}, {hi:.2}{close} {c:>6} {bar}");
    }
    s
}
