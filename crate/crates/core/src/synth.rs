//! Synthetic tone-in-noise corpora for tests and demos.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{save_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord, Subset};

#[derive(Debug, Clone, PartialEq)]
pub struct ToneSpec {
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Silence before the tone starts, leaving noise-only frames up front.
    pub onset_s: f64,
    pub freq_hz: f64,
    /// Peak amplitude of the tone.
    pub amplitude: f64,
    /// Ratio of tone energy to noise energy over the whole utterance.
    pub snr_db: f64,
}

impl Default for ToneSpec {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration_s: 1.0,
            onset_s: 0.15,
            freq_hz: 440.0,
            amplitude: 0.1,
            snr_db: 10.0,
        }
    }
}

/// Returns `(clean, noisy)`; the white noise is scaled so the mixture has
/// exactly `spec.snr_db`.
pub fn tone_in_noise(spec: &ToneSpec, seed: u64) -> (Waveform, Waveform) {
    let sr = spec.sample_rate as f64;
    let len = (spec.duration_s * sr).round() as usize;
    let onset = (spec.onset_s * sr).round() as usize;
    let clean: Vec<f64> = (0..len)
        .map(|i| {
            if i < onset {
                0.0
            } else {
                spec.amplitude * (2.0 * std::f64::consts::PI * spec.freq_hz * i as f64 / sr).sin()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let e_clean: f64 = clean.iter().map(|v| v * v).sum();
    let e_noise: f64 = noise.iter().map(|v| v * v).sum();
    let gain = (e_clean / (e_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let noisy = clean.iter().zip(&noise).map(|(c, n)| c + gain * n).collect();
    (
        Waveform::new(clean, spec.sample_rate).expect("finite"),
        Waveform::new(noisy, spec.sample_rate).expect("finite"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_utts: usize,
    pub snr_range_db: (f64, f64),
    pub freq_range_hz: (f64, f64),
    pub duration_s: f64,
    /// Fraction of utterances assigned to `dt_simu`; the rest are `tr_simu`.
    pub dev_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_utts: 200,
            snr_range_db: (-5.0, 20.0),
            freq_range_hz: (200.0, 1200.0),
            duration_s: 1.0,
            dev_fraction: 0.2,
        }
    }
}

/// Writes clean and noisy WAVs under `dir` plus `dir/manifest.jsonl`.
///
/// Every record carries its clean path, mixing SNR and a fixed transcript.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, seed: u64) -> Result<Manifest> {
    if spec.n_utts == 0 || !(0.0..=1.0).contains(&spec.dev_fraction) {
        return Err(Error::invalid("corpus needs n_utts > 0 and dev_fraction in [0, 1]"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_dev = (spec.n_utts as f64 * spec.dev_fraction).round() as usize;
    let mut records = Vec::with_capacity(spec.n_utts);
    for i in 0..spec.n_utts {
        let tone = ToneSpec {
            duration_s: spec.duration_s,
            freq_hz: rng.random_range(spec.freq_range_hz.0..=spec.freq_range_hz.1),
            snr_db: rng.random_range(spec.snr_range_db.0..=spec.snr_range_db.1),
            ..ToneSpec::default()
        };
        let (clean, noisy) = tone_in_noise(&tone, rng.random());
        let utt_id = format!("syn{i:04}");
        let clean_path = dir.join(format!("{utt_id}.clean.wav"));
        let noisy_path = dir.join(format!("{utt_id}.noisy.wav"));
        save_wav(&clean, &clean_path)?;
        save_wav(&noisy, &noisy_path)?;
        let subset: Subset = if i >= spec.n_utts - n_dev { "dt_simu" } else { "tr_simu" }
            .parse()
            .expect("valid tag");
        records.push(ManifestRecord {
            utt_id,
            noisy_path,
            enhanced_path: None,
            transcript: Some("the quick brown fox".into()),
            subset,
            channel: None,
            clean_path: Some(clean_path),
            snr_db: Some(tone.snr_db),
        });
    }
    let manifest = Manifest::new(records)?;
    // Stored paths are relative to the manifest so the corpus can be moved.
    let mut portable = manifest.clone();
    for r in &mut portable.records {
        for p in [Some(&mut r.noisy_path), r.clean_path.as_mut()].into_iter().flatten() {
            *p = p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.clone());
        }
    }
    portable.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::snr_db;

    #[test]
    fn mixture_hits_requested_snr() {
        for target in [-5.0, 0.0, 7.5, 20.0] {
            let (c, n) = tone_in_noise(&ToneSpec { snr_db: target, ..ToneSpec::default() }, 9);
            assert!((snr_db(&c, &n).unwrap() - target).abs() < 1e-9);
            assert!(c.samples()[..2400].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { n_utts: 10, ..CorpusSpec::default() };
        let m = write_corpus(dir.path(), &spec, 1).unwrap();
        assert_eq!(m.len(), 10);
        let dev = m.records.iter().filter(|r| r.subset.to_string() == "dt_simu").count();
        assert_eq!(dev, 2);
        let reloaded = Manifest::load(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded, m);
        assert!(m.records.iter().all(|r| (-5.0..=20.0).contains(&r.snr_db.unwrap())));
    }
}
