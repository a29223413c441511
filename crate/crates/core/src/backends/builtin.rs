use std::collections::HashMap;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{backend_err, check_enhanced, Enhancer, RecognitionRequest, Recognizer, Scorer};
use crate::audio::{align_pair, load_wav, snr_db, OaGrid, Waveform, DEFAULT_ALIGN_TOLERANCE_S};
use crate::error::{Error, Result};
use crate::manifest::ManifestRecord;
use crate::supervision::MosScore;

/// Returns its input unchanged.
#[derive(Debug, Clone)]
pub struct IdentityEnhancer {
    id: String,
}

impl IdentityEnhancer {
    pub fn new(id: &str) -> Self {
        Self { id: id.into() }
    }
}

impl Enhancer for IdentityEnhancer {
    fn id(&self) -> &str {
        &self.id
    }

    fn enhance(&self, _rec: &ManifestRecord, x: &Waveform) -> Result<Waveform> {
        Ok(x.clone())
    }
}

/// Reads the enhanced waveform named by the record's `enhanced_path`.
#[derive(Debug, Clone)]
pub struct PrecomputedEnhancer {
    id: String,
}

impl PrecomputedEnhancer {
    pub fn new(id: &str) -> Self {
        Self { id: id.into() }
    }
}

impl Enhancer for PrecomputedEnhancer {
    fn id(&self) -> &str {
        &self.id
    }

    fn enhance(&self, rec: &ManifestRecord, x: &Waveform) -> Result<Waveform> {
        let path = rec
            .enhanced_path
            .as_ref()
            .ok_or_else(|| backend_err(&self.id, &rec.utt_id, "record has no enhanced_path"))?;
        let y = load_wav(path, None).map_err(|e| backend_err(&self.id, &rec.utt_id, e.to_string()))?;
        check_enhanced(&self.id, &rec.utt_id, x, &y)?;
        Ok(y)
    }
}

/// Magnitude spectral subtraction with the noise spectrum estimated from the
/// leading segment of the utterance.
#[derive(Debug, Clone)]
pub struct SpectralSubtraction {
    id: String,
    pub fft_size: usize,
    pub noise_ms: f64,
    pub over_subtraction: f64,
    pub spectral_floor: f64,
}

impl SpectralSubtraction {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.into(),
            fft_size: 512,
            noise_ms: 100.0,
            over_subtraction: 2.0,
            spectral_floor: 0.02,
        }
    }

    pub fn process(&self, x: &Waveform) -> Result<Waveform> {
        let n = self.fft_size;
        let hop = n / 2;
        let len = x.len();
        // Pad so every original sample is covered by two half-overlapping frames.
        let mut padded = vec![0.0; n];
        padded.extend_from_slice(x.samples());
        padded.resize(n + len + n + hop, 0.0);
        let n_frames = (padded.len() - n) / hop + 1;

        // periodic Hann sums to one at 50% overlap
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);

        let spectra: Vec<Vec<Complex<f64>>> = (0..n_frames)
            .map(|f| {
                let mut buf: Vec<Complex<f64>> = (0..n)
                    .map(|i| Complex::new(padded[f * hop + i] * window[i], 0.0))
                    .collect();
                fwd.process(&mut buf);
                buf
            })
            .collect();

        let noise_len = (self.noise_ms * x.sample_rate() as f64 / 1000.0) as usize;
        let noise_frames: Vec<usize> = (0..n_frames)
            .filter(|&f| {
                let start = (f * hop) as isize - n as isize;
                start >= 0 && start as usize + n <= noise_len.min(len)
            })
            .collect();
        let noise_frames = if noise_frames.is_empty() { vec![2.min(n_frames - 1)] } else { noise_frames };
        let mut noise = vec![0.0; n];
        for &f in &noise_frames {
            for (k, v) in spectra[f].iter().enumerate() {
                noise[k] += v.norm() / noise_frames.len() as f64;
            }
        }

        let mut out = vec![0.0; padded.len()];
        for (f, spec) in spectra.into_iter().enumerate() {
            let mut buf: Vec<Complex<f64>> = spec
                .into_iter()
                .enumerate()
                .map(|(k, c)| {
                    let mag = c.norm();
                    if mag == 0.0 {
                        return c;
                    }
                    let cleaned = (mag - self.over_subtraction * noise[k]).max(self.spectral_floor * mag);
                    c * (cleaned / mag)
                })
                .collect();
            inv.process(&mut buf);
            for i in 0..n {
                out[f * hop + i] += buf[i].re / n as f64;
            }
        }
        Waveform::new(out[n..n + len].to_vec(), x.sample_rate())
    }
}

impl Enhancer for SpectralSubtraction {
    fn id(&self) -> &str {
        &self.id
    }

    fn enhance(&self, _rec: &ManifestRecord, x: &Waveform) -> Result<Waveform> {
        self.process(x)
    }
}

/// Closed-form, non-physical quality stand-in driven by utterance SNR `s` (dB):
/// `sig = clamp(3 + s/20, 1, 5)`, `bak = clamp(3 + s/10, 1, 5)`.
///
/// The SNR is measured against the record's clean reference when it has one,
/// otherwise taken from the record's `snr_db`.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    id: String,
}

impl SyntheticScorer {
    pub fn new(id: &str) -> Self {
        Self { id: id.into() }
    }

    pub fn map_snr(snr_db: f64) -> MosScore {
        MosScore {
            sig: (3.0 + snr_db / 20.0).clamp(1.0, 5.0),
            bak: (3.0 + snr_db / 10.0).clamp(1.0, 5.0),
        }
    }
}

impl Scorer for SyntheticScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, rec: &ManifestRecord, w: &Waveform) -> Result<MosScore> {
        let snr = match (&rec.clean_path, rec.snr_db) {
            (Some(clean), _) => {
                let clean = load_wav(clean, None).map_err(|e| backend_err(&self.id, &rec.utt_id, e.to_string()))?;
                let (c, e) = align_pair(&clean, w, DEFAULT_ALIGN_TOLERANCE_S)?;
                snr_db(&c, &e)?
            }
            (None, Some(s)) => s,
            (None, None) => {
                return Err(backend_err(
                    &self.id,
                    &rec.utt_id,
                    "synthetic scorer needs clean_path or snr_db",
                ))
            }
        };
        Ok(Self::map_snr(snr))
    }
}

/// One row of a scripted recognizer table. `omega: None` matches any coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub utt_id: String,
    #[serde(default)]
    pub omega: Option<f64>,
    pub text: String,
}

/// Fake recognizer answering from a table keyed by utterance id and the
/// nearest grid coefficient.
#[derive(Debug, Clone)]
pub struct ScriptedRecognizer {
    id: String,
    grid: OaGrid,
    table: HashMap<(String, Option<i64>), String>,
}

fn omega_key(omega: f64) -> i64 {
    (omega * 1e6).round() as i64
}

impl ScriptedRecognizer {
    pub fn new(id: &str, grid: OaGrid, entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let table = entries
            .into_iter()
            .map(|e| ((e.utt_id, e.omega.map(|w| omega_key(grid.nearest(w)))), e.text))
            .collect();
        Self {
            id: id.into(),
            grid,
            table,
        }
    }

    pub fn from_file(id: &str, path: &Path, grid: OaGrid) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ScriptEntry>, _>>()?;
        Ok(Self::new(id, grid, entries))
    }
}

impl Recognizer for ScriptedRecognizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn transcribe(&self, req: &RecognitionRequest<'_>) -> Result<String> {
        let snapped = req.omega.map(|w| self.grid.nearest(w));
        let exact = snapped.and_then(|w| self.table.get(&(req.utt_id.to_string(), Some(omega_key(w)))));
        exact
            .or_else(|| self.table.get(&(req.utt_id.to_string(), None)))
            .cloned()
            .ok_or_else(|| {
                backend_err(
                    &self.id,
                    req.utt_id,
                    format!("no scripted transcript for ({}, ω={:?})", req.utt_id, snapped),
                )
            })
    }
}

type TranscribeFn = dyn Fn(&RecognitionRequest<'_>) -> Result<String> + Send + Sync;

/// Recognizer backed by a closure.
pub struct FnRecognizer {
    id: String,
    f: Box<TranscribeFn>,
}

impl FnRecognizer {
    pub fn new(
        id: &str,
        f: impl Fn(&RecognitionRequest<'_>) -> Result<String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
        }
    }
}

impl Recognizer for FnRecognizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn transcribe(&self, req: &RecognitionRequest<'_>) -> Result<String> {
        (self.f)(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{tone_in_noise, ToneSpec};

    fn record(id: &str) -> ManifestRecord {
        ManifestRecord {
            utt_id: id.into(),
            noisy_path: "unused.wav".into(),
            enhanced_path: None,
            transcript: None,
            subset: "tr_simu".parse().unwrap(),
            channel: None,
            clean_path: None,
            snr_db: None,
        }
    }

    #[test]
    fn spectral_subtraction_raises_snr() {
        let spec = ToneSpec {
            snr_db: 0.0,
            ..ToneSpec::default()
        };
        let (clean, noisy) = tone_in_noise(&spec, 3);
        let enhanced = SpectralSubtraction::new("ss").process(&noisy).unwrap();
        assert_eq!(enhanced.len(), noisy.len());
        let before = snr_db(&clean, &noisy).unwrap();
        let after = snr_db(&clean, &enhanced).unwrap();
        assert!((before - 0.0).abs() < 0.5, "input SNR {before}");
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn spectral_subtraction_is_deterministic() {
        let (_, noisy) = tone_in_noise(&ToneSpec::default(), 4);
        let ss = SpectralSubtraction::new("ss");
        let a = ss.process(&noisy).unwrap();
        let b = ss.process(&noisy).unwrap();
        assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn spectral_subtraction_without_noise_is_near_transparent() {
        let spec = ToneSpec {
            snr_db: 200.0,
            ..ToneSpec::default()
        };
        let (clean, noisy) = tone_in_noise(&spec, 5);
        let out = SpectralSubtraction::new("ss").process(&noisy).unwrap();
        assert!(snr_db(&clean, &out).unwrap() > 40.0);
    }

    #[test]
    fn identity_and_precomputed() {
        let x = Waveform::new(vec![0.1, -0.2, 0.3], 16000).unwrap();
        assert_eq!(IdentityEnhancer::new("id").enhance(&record("u"), &x).unwrap(), x);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enh.wav");
        let y = Waveform::new(vec![0.5, -0.25, 0.125], 16000).unwrap();
        crate::audio::save_wav(&y, &path).unwrap();
        let mut rec = record("u");
        assert!(PrecomputedEnhancer::new("pre").enhance(&rec, &x).is_err());
        rec.enhanced_path = Some(path.clone());
        let got = PrecomputedEnhancer::new("pre").enhance(&rec, &x).unwrap();
        assert_eq!(got, load_wav(&path, None).unwrap());

        let other_rate = Waveform::new(vec![0.0; 3], 8000).unwrap();
        assert!(PrecomputedEnhancer::new("pre").enhance(&rec, &other_rate).is_err());
    }

    #[test]
    fn synthetic_scorer_map() {
        assert_eq!(SyntheticScorer::map_snr(0.0), MosScore { sig: 3.0, bak: 3.0 });
        assert_eq!(SyntheticScorer::map_snr(40.0), MosScore { sig: 5.0, bak: 5.0 });
        assert_eq!(SyntheticScorer::map_snr(-40.0), MosScore { sig: 1.0, bak: 1.0 });
        let mut rec = record("u");
        let w = Waveform::zeros(10, 16000).unwrap();
        assert!(SyntheticScorer::new("s").score(&rec, &w).is_err());
        rec.snr_db = Some(10.0);
        assert_eq!(SyntheticScorer::new("s").score(&rec, &w).unwrap(), MosScore { sig: 3.5, bak: 4.0 });
    }

    #[test]
    fn synthetic_scorer_measures_against_clean() {
        let dir = tempfile::tempdir().unwrap();
        let (clean, noisy) = tone_in_noise(&ToneSpec { snr_db: 10.0, ..ToneSpec::default() }, 6);
        let clean_path = dir.path().join("clean.wav");
        crate::audio::save_wav(&clean, &clean_path).unwrap();
        let mut rec = record("u");
        rec.clean_path = Some(clean_path);
        let m = SyntheticScorer::new("s").score(&rec, &noisy).unwrap();
        assert!((m.bak - 4.0).abs() < 0.05, "{m:?}");
    }

    #[test]
    fn scripted_lookup() {
        let grid = OaGrid::new(0.1).unwrap();
        let asr = ScriptedRecognizer::new(
            "fake",
            grid,
            vec![
                ScriptEntry { utt_id: "u1".into(), omega: Some(1.0), text: "a b c".into() },
                ScriptEntry { utt_id: "u2".into(), omega: None, text: "x".into() },
            ],
        );
        let w = Waveform::zeros(4, 16000).unwrap();
        let req = |utt, omega| RecognitionRequest { utt_id: utt, omega, audio: &w };
        assert_eq!(asr.transcribe(&req("u1", Some(1.0))).unwrap(), "a b c");
        assert_eq!(asr.transcribe(&req("u1", Some(0.97))).unwrap(), "a b c");
        assert_eq!(asr.transcribe(&req("u2", Some(0.3))).unwrap(), "x");
        let err = asr.transcribe(&req("u1", Some(0.5))).unwrap_err().to_string();
        assert!(err.contains("u1") && err.contains("0.5"), "{err}");
    }
}
