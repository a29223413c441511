use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::pq_target;
use super::wer::{normalize_text, ErrorCount};
use crate::audio::{oa_blend, OaGrid};
use crate::backends::{Enhancer, RecognitionRequest, Recognizer, Scorer};
use crate::cache::{timestamp, BackendIds, PqCache, PqRecord, WerCache, WerRecord};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord};
use crate::pipeline::load_pair;

/// WERs of one utterance over the grid, index 0 at ω = 1 and the last
/// index at ω = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerVector {
    pub values: Vec<f64>,
}

impl WerVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("WER value {v} is not a finite non-negative number")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-coefficient error counts for one utterance, in descending-ω order.
///
/// Consults `cache` first and stores fresh results in it.
pub fn grid_error_counts(
    rec: &ManifestRecord,
    grid: &OaGrid,
    enhancer: &dyn Enhancer,
    asr: &dyn Recognizer,
    cache: Option<&WerCache>,
) -> Result<Vec<ErrorCount>> {
    let reference = normalize_text(rec.transcript()?);
    if reference.is_empty() {
        return Err(Error::Manifest(format!("utterance {} has an empty transcript", rec.utt_id)));
    }
    let n = reference.len();
    let ids = BackendIds {
        enhancer: enhancer.id().to_string(),
        recognizer: asr.id().to_string(),
    };
    let key = WerRecord::cache_key(&rec.utt_id, &grid.fingerprint(), &ids);
    if let Some(hit) = cache.and_then(|c| c.get(&key)) {
        if hit.values.len() == grid.len() {
            return Ok(hit
                .values
                .iter()
                .map(|v| ErrorCount {
                    errors: (v * n as f64).round() as usize,
                    ref_words: n,
                })
                .collect());
        }
    }

    let (x, y) = load_pair(rec, enhancer)?;
    let counts = grid
        .descending()
        .par_iter()
        .map(|&omega| {
            let blended = oa_blend(&x, &y, omega).map_err(|e| e.at_stage(&rec.utt_id, "blend"))?;
            let req = RecognitionRequest {
                utt_id: &rec.utt_id,
                omega: Some(omega),
                audio: &blended,
            };
            let hyp = asr.transcribe(&req).map_err(|e| e.at_stage(&rec.utt_id, "transcribe"))?;
            Ok(ErrorCount::between(&reference, &normalize_text(&hyp)))
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(c) = cache {
        c.put(WerRecord {
            utt_id: rec.utt_id.clone(),
            backend_ids: ids,
            grid: grid.descending(),
            grid_hash: grid.fingerprint(),
            values: counts.iter().map(|c| c.errors as f64 / n as f64).collect(),
            created_at: timestamp(),
        })?;
    }
    Ok(counts)
}

/// Blends, transcribes and scores the utterance at every grid coefficient.
pub fn build_wer_vector(
    rec: &ManifestRecord,
    grid: &OaGrid,
    enhancer: &dyn Enhancer,
    asr: &dyn Recognizer,
    cache: Option<&WerCache>,
) -> Result<WerVector> {
    let counts = grid_error_counts(rec, grid, enhancer, asr, cache)?;
    WerVector::new(counts.iter().map(|c| c.errors as f64 / c.ref_words as f64).collect())
}

/// [`build_wer_vector`] for every record, in manifest order.
pub fn build_wer_vectors(
    manifest: &Manifest,
    grid: &OaGrid,
    enhancer: &dyn Enhancer,
    asr: &dyn Recognizer,
    cache: Option<&WerCache>,
) -> Vec<(String, Result<WerVector>)> {
    manifest
        .records
        .par_iter()
        .map(|rec| (rec.utt_id.clone(), build_wer_vector(rec, grid, enhancer, asr, cache)))
        .collect()
}

/// Quality targets keyed by utterance, plus the utterances whose scoring failed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqTargets {
    pub targets: BTreeMap<String, f64>,
    pub failures: BTreeMap<String, String>,
}

/// Scores each noisy waveform and maps the result to a target in [0, 1].
/// Scorer failures are recorded and skipped.
pub fn build_pq_targets(manifest: &Manifest, scorer: &dyn Scorer, cache: Option<&PqCache>) -> PqTargets {
    let results: Vec<(String, Result<PqRecord>)> = manifest
        .records
        .par_iter()
        .map(|rec| (rec.utt_id.clone(), score_one(rec, scorer, cache)))
        .collect();

    let mut out = PqTargets::default();
    for (utt, r) in results {
        match r {
            Ok(PqRecord { target: Some(t), .. }) => {
                out.targets.insert(utt, t);
            }
            Ok(PqRecord { error, .. }) => {
                out.failures.insert(utt, error.unwrap_or_default());
            }
            Err(e) => {
                out.failures.insert(utt, e.to_string());
            }
        }
    }
    for (utt, msg) in &out.failures {
        log::warn!("skipping {utt}: {msg}");
    }
    out
}

fn score_one(rec: &ManifestRecord, scorer: &dyn Scorer, cache: Option<&PqCache>) -> Result<PqRecord> {
    let key = PqRecord::cache_key(&rec.utt_id, scorer.id());
    if let Some(hit) = cache.and_then(|c| c.get(&key)).filter(|r| r.target.is_some()) {
        return Ok(hit);
    }
    let scored = rec
        .load_noisy()
        .map_err(|e| e.at_stage(&rec.utt_id, "load"))
        .and_then(|x| scorer.score(rec, &x).map_err(|e| e.at_stage(&rec.utt_id, "score")));
    let record = match scored {
        Ok(m) => PqRecord {
            utt_id: rec.utt_id.clone(),
            scorer_id: scorer.id().to_string(),
            sig: Some(m.sig),
            bak: Some(m.bak),
            target: Some(pq_target(m)),
            error: None,
            created_at: timestamp(),
        },
        Err(e) => PqRecord {
            utt_id: rec.utt_id.clone(),
            scorer_id: scorer.id().to_string(),
            sig: None,
            bak: None,
            target: None,
            error: Some(e.to_string()),
            created_at: timestamp(),
        },
    };
    if let Some(c) = cache {
        c.put(record.clone())?;
    }
    Ok(record)
}
