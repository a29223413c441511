use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use oa_bridge::audio::{load_wav, save_wav, OaGrid, Waveform};
use oa_bridge::backends::{Backends, FnRecognizer, IdentityEnhancer, RecognitionRequest, Recognizer, SpectralSubtraction};
use oa_bridge::features::FbankConfig;
use oa_bridge::manifest::{Manifest, ManifestRecord};
use oa_bridge::model::{BridgingNet, ModelConfig};
use oa_bridge::pipeline::{evaluate, histogram, infer_utterance, OmegaPolicy};
use oa_bridge::training::Strategy;

fn record(dir: &Path, id: &str, subset: &str, transcript: &str, seed: u64) -> ManifestRecord {
    let path = dir.join(format!("{id}.wav"));
    let samples = (0..4000)
        .map(|i| ((i as f64 * 0.013 * (seed + 1) as f64).sin() + 0.3 * (i as f64 * 0.17).cos()) * 0.2)
        .collect();
    save_wav(&Waveform::new(samples, 16000).unwrap(), &path).unwrap();
    ManifestRecord {
        utt_id: id.into(),
        noisy_path: path,
        enhanced_path: None,
        transcript: Some(transcript.into()),
        subset: subset.parse().unwrap(),
        channel: None,
        clean_path: None,
        snr_db: None,
    }
}

/// Answers with a fixed hypothesis per utterance.
fn table_backends(hyps: &[(&str, &str)]) -> Backends {
    let table: HashMap<String, String> = hyps.iter().map(|(u, h)| (u.to_string(), h.to_string())).collect();
    let asr = FnRecognizer::new("table", move |req: &RecognitionRequest<'_>| Ok(table[req.utt_id].clone()));
    Backends::new(Arc::new(IdentityEnhancer::new("id")), Arc::new(asr))
}

#[test]
fn pooled_wer_matches_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![
        record(dir.path(), "a", "et_simu", "the cat sat down", 0),
        record(dir.path(), "b", "et_simu", "one two three four five six", 1),
        record(dir.path(), "c", "et_real", "hello there", 2),
    ])
    .unwrap();
    // a: 1 substitution; b: 1 deletion + 1 insertion; c: perfect.
    let backends = table_backends(&[
        ("a", "the cat sat town"),
        ("b", "one two four five six seven"),
        ("c", "Hello, there."),
    ]);
    let report = evaluate(&m, &OmegaPolicy::Fixed(0.5), &backends, "fp");
    assert!(report.failures.is_empty());
    let simu = &report.subsets["et_simu"];
    assert_eq!((simu.errors, simu.ref_words), (3, 10));
    assert!((simu.wer_percent.unwrap() - 30.0).abs() < 1e-12);
    assert_eq!(report.subsets["et_real"].errors, 0);
    assert_eq!((report.overall.errors, report.overall.ref_words), (3, 12));
    assert!((report.overall.wer_percent.unwrap() - 25.0).abs() < 1e-12);
    assert!(report.rows.iter().all(|r| r.omega == 0.5));
}

#[test]
fn subset_filter_restricts_pool() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![
        record(dir.path(), "a", "et_simu", "a b", 0),
        record(dir.path(), "c", "et_real", "a b", 1),
    ])
    .unwrap();
    let backends = table_backends(&[("a", "a"), ("c", "a b")]);
    let only_real = m.filter_subsets(&["et_real".parse().unwrap()]);
    let report = evaluate(&only_real, &OmegaPolicy::Fixed(1.0), &backends, "fp");
    assert_eq!(report.overall.errors, 0);
    assert_eq!(report.overall.utterances, 1);
    assert!(!report.subsets.contains_key("et_simu"));
}

#[test]
fn pooled_wer_ignores_record_order() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        record(dir.path(), "a", "et_simu", "the cat sat down", 0),
        record(dir.path(), "b", "et_simu", "one two three", 1),
        record(dir.path(), "c", "et_simu", "x y", 2),
    ];
    let backends = table_backends(&[("a", "the cat"), ("b", "one two three four"), ("c", "x z")]);
    let fwd = evaluate(&Manifest::new(recs.clone()).unwrap(), &OmegaPolicy::Fixed(0.3), &backends, "fp");
    let rev = evaluate(
        &Manifest::new(recs.into_iter().rev().collect()).unwrap(),
        &OmegaPolicy::Fixed(0.3),
        &backends,
        "fp",
    );
    assert_eq!(fwd.overall, rev.overall);
    assert_eq!(fwd.subsets, rev.subsets);
}

#[test]
fn failing_utterance_is_listed_and_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(vec![
        record(dir.path(), "a", "et_simu", "a b", 0),
        record(dir.path(), "b", "et_simu", "a b", 1),
    ])
    .unwrap();
    let asr = FnRecognizer::new("flaky", |req: &RecognitionRequest<'_>| {
        if req.utt_id == "b" {
            Err(oa_bridge::Error::Backend {
                backend: "flaky".into(),
                utt_id: "b".into(),
                message: "decoder crashed".into(),
            })
        } else {
            Ok("a b".into())
        }
    });
    let backends = Backends::new(Arc::new(IdentityEnhancer::new("id")), Arc::new(asr));
    let report = evaluate(&m, &OmegaPolicy::Fixed(0.0), &backends, "fp");
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].utt_id, "b");
    assert_eq!(report.overall.utterances, 1);
}

#[test]
fn identity_enhancer_blend_is_the_noisy_signal() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(dir.path(), "a", "et_simu", "a", 0);
    let x = load_wav(&rec.noisy_path, None).unwrap();
    let backends = table_backends(&[("a", "a")]);
    for w in [0.0, 0.37, 1.0] {
        let inf = infer_utterance(&rec, &OmegaPolicy::Fixed(w), &backends).unwrap();
        for (a, b) in inf.blended.samples().iter().zip(x.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Text derived from the sample sum and energy.
fn audio_fingerprint_asr() -> FnRecognizer {
    FnRecognizer::new("fingerprint", |req: &RecognitionRequest<'_>| {
        let s: f64 = req.audio.samples().iter().sum();
        let e: f64 = req.audio.samples().iter().map(|v| v * v).sum();
        Ok(format!("{:.9} {:.9}", s, e))
    })
}

#[test]
fn saturated_quality_head_transcribes_noisy_input() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(dir.path(), "a", "et_simu", "a", 3);
    let mut net = BridgingNet::init(ModelConfig::tiny(), 0).unwrap();
    net.params.pq_head.bias.fill(50.0);
    let grid = OaGrid::new(0.1).unwrap();
    let fbank = FbankConfig::default();
    let policy = OmegaPolicy::Model {
        net: &net,
        strategy: Strategy::Pq,
        grid: &grid,
        fbank: &fbank,
    };
    let backends = Backends::new(Arc::new(SpectralSubtraction::new("ss")), Arc::new(audio_fingerprint_asr()));
    let inf = infer_utterance(&rec, &policy, &backends).unwrap();
    assert_eq!(inf.omega, 1.0);

    let x = load_wav(&rec.noisy_path, None).unwrap();
    let direct = audio_fingerprint_asr();
    let req = RecognitionRequest { utt_id: "a", omega: None, audio: &x };
    assert_eq!(inf.hypothesis, direct.transcribe(&req).unwrap());
}

#[test]
fn histogram_of_constant_omega_lands_in_one_bin() {
    let counts = histogram(&[0.55; 20], 10).unwrap();
    let mut want = vec![0; 10];
    want[5] = 20;
    assert_eq!(counts, want);
    assert_eq!(histogram(&[1.0], 10).unwrap()[9], 1);
    assert_eq!(histogram(&[0.0], 10).unwrap()[0], 1);
}
