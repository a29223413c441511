use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use oa_bridge::audio::{save_wav, OaGrid, Waveform};
use oa_bridge::backends::{FnRecognizer, IdentityEnhancer, RecognitionRequest, Scorer, SyntheticScorer};
use oa_bridge::cache::{PqCache, WerCache};
use oa_bridge::manifest::{Manifest, ManifestRecord};
use oa_bridge::supervision::{build_pq_targets, build_wer_vector, build_wer_vectors, MosScore};
use oa_bridge::Error;

fn record(dir: &Path, id: &str, transcript: &str) -> ManifestRecord {
    let path = dir.join(format!("{id}.wav"));
    let w = Waveform::new((0..1600).map(|i| (i as f64 * 0.01).sin() * 0.1).collect(), 16000).unwrap();
    save_wav(&w, &path).unwrap();
    ManifestRecord {
        utt_id: id.into(),
        noisy_path: path,
        enhanced_path: None,
        transcript: Some(transcript.into()),
        subset: "tr_simu".parse().unwrap(),
        channel: None,
        clean_path: None,
        snr_db: Some(0.0),
    }
}

/// Correct for ω ≥ 0.5, one substitution below.
fn threshold_asr() -> FnRecognizer {
    FnRecognizer::new("threshold", |req: &RecognitionRequest<'_>| {
        Ok(if req.omega.unwrap() >= 0.5 - 1e-9 { "one two three four" } else { "one two three fore" }.into())
    })
}

#[test]
fn wer_vector_follows_descending_grid() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(dir.path(), "u1", "one two three four");
    let grid = OaGrid::new(0.1).unwrap();
    let v = build_wer_vector(&rec, &grid, &IdentityEnhancer::new("id"), &threshold_asr(), None).unwrap();
    let want = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.25];
    assert_eq!(v.values, want);
}

#[test]
fn perfect_asr_gives_zero_vector() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(dir.path(), "u1", "Hello, World!");
    let asr = FnRecognizer::new("echo", |_: &RecognitionRequest<'_>| Ok("hello world".into()));
    let v = build_wer_vector(&rec, &OaGrid::new(0.1).unwrap(), &IdentityEnhancer::new("id"), &asr, None).unwrap();
    assert_eq!(v.values, vec![0.0; 11]);
}

#[test]
fn wer_cache_short_circuits_recognition() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(dir.path(), "u1", "one two three four");
    let grid = OaGrid::new(0.1).unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let asr = FnRecognizer::new("threshold", move |req: &RecognitionRequest<'_>| {
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(if req.omega.unwrap() >= 0.5 { "one two three four" } else { "one" }.into())
    });
    let cache_path = dir.path().join("wer.jsonl");
    let enh = IdentityEnhancer::new("id");
    let first = {
        let cache = WerCache::open(&cache_path).unwrap();
        build_wer_vector(&rec, &grid, &enh, &asr, Some(&cache)).unwrap()
    };
    assert_eq!(calls.load(Ordering::SeqCst), 11);
    let cache = WerCache::open(&cache_path).unwrap();
    let second = build_wer_vector(&rec, &grid, &enh, &asr, Some(&cache)).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 11);
    assert_eq!(first, second);

    // A different grid is a different key.
    build_wer_vector(&rec, &OaGrid::new(0.05).unwrap(), &enh, &asr, Some(&cache)).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 11 + 21);
}

#[test]
fn wer_vectors_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<_> = (0..6).map(|i| record(dir.path(), &format!("u{i}"), "one two three four")).collect();
    let m = Manifest::new(records).unwrap();
    let grid = OaGrid::new(0.1).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            build_wer_vectors(&m, &grid, &IdentityEnhancer::new("id"), &threshold_asr(), None)
                .into_iter()
                .map(|(u, r)| (u, r.unwrap().values))
                .collect::<Vec<_>>()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn missing_transcript_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = record(dir.path(), "u1", "x");
    rec.transcript = None;
    let err = build_wer_vector(&rec, &OaGrid::new(0.1).unwrap(), &IdentityEnhancer::new("id"), &threshold_asr(), None);
    assert!(err.is_err());
}

struct FixedScorer(MosScore);

impl Scorer for FixedScorer {
    fn id(&self) -> &str {
        "fixed"
    }

    fn score(&self, rec: &ManifestRecord, _: &Waveform) -> oa_bridge::Result<MosScore> {
        if rec.utt_id == "bad" {
            return Err(Error::Backend {
                backend: "fixed".into(),
                utt_id: rec.utt_id.clone(),
                message: "scorer crashed".into(),
            });
        }
        Ok(self.0)
    }
}

#[test]
fn zero_db_with_sig3_bak2_gives_0_375() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![record(dir.path(), "u1", "a")]).unwrap();
    let t = build_pq_targets(&m, &FixedScorer(MosScore { sig: 3.0, bak: 2.0 }), None);
    assert_eq!(t.targets["u1"], 0.375);
}

#[test]
fn top_scores_give_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![record(dir.path(), "u1", "a")]).unwrap();
    let t = build_pq_targets(&m, &FixedScorer(MosScore { sig: 5.0, bak: 5.0 }), None);
    assert_eq!(t.targets["u1"], 1.0);
}

#[test]
fn synthetic_scorer_targets_track_snr() {
    for (snr, want) in [(0.0, 0.5), (20.0, 0.875), (-5.0, 0.40625)] {
        let m = SyntheticScorer::map_snr(snr);
        let t = ((m.sig - 1.0) / 4.0 + (m.bak - 1.0) / 4.0) / 2.0;
        assert!((t - want).abs() < 1e-12, "snr {snr}: {t}");
    }
}

#[test]
fn scorer_failure_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![
        record(dir.path(), "u1", "a"),
        record(dir.path(), "bad", "a"),
        record(dir.path(), "u3", "a"),
    ])
    .unwrap();
    let cache = PqCache::open(dir.path().join("pq.jsonl")).unwrap();
    let t = build_pq_targets(&m, &FixedScorer(MosScore { sig: 4.0, bak: 4.0 }), Some(&cache));
    assert_eq!(t.targets.len(), 2);
    assert_eq!(t.failures.keys().collect::<Vec<_>>(), ["bad"]);
    let records = cache.records();
    assert_eq!(records.len(), 3);
    assert_eq!(records.iter().filter(|r| r.target.is_some()).count(), 2);
    assert!(records.iter().any(|r| r.utt_id == "bad" && r.error.is_some()));
}
