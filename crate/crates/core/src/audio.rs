//! Waveform I/O, noisy/enhanced alignment and observation addition.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Default tolerance for [`align_pair`], in seconds.
pub const DEFAULT_ALIGN_TOLERANCE_S: f64 = 0.5;

/// Zero-based channel index of the fifth microphone in a multi-channel recording.
pub const CHIME_CHANNEL_INDEX: usize = 4;

const I16_SCALE: f64 = 32768.0;

/// Mono PCM signal with real amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Returns a copy truncated to the first `len` samples.
    pub fn prefix(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> Result<Waveform> {
        Waveform::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }
}

/// Reads a PCM WAV file.
///
/// Multi-channel files require `channel`; mono files accept `None` or `Some(0)`.
pub fn load_wav(path: impl AsRef<Path>, channel: Option<usize>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    read_wav(reader, channel).map_err(|e| match e {
        Error::Wav { message, .. } => Error::Wav {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Decodes WAV bytes held in memory.
pub fn decode_wav(bytes: &[u8], channel: Option<usize>) -> Result<Waveform> {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes))
        .map_err(|e| wav_err(Path::new("<memory>"), e))?;
    read_wav(reader, channel)
}

fn read_wav<R: std::io::Read>(
    mut reader: hound::WavReader<R>,
    channel: Option<usize>,
) -> Result<Waveform> {
    let spec = reader.spec();
    let n_channels = spec.channels as usize;
    let channel = match channel {
        Some(c) if c >= n_channels => {
            return Err(Error::ChannelAbsent {
                requested: c,
                available: n_channels,
            })
        }
        Some(c) => c,
        None if n_channels == 1 => 0,
        None => {
            return Err(Error::invalid(format!(
                "{n_channels}-channel file needs an explicit channel index"
            )))
        }
    };

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / I16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(Path::new("<stream>"), e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(Path::new("<stream>"), e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} with {bits} bits per sample"
            )))
        }
    };

    let samples = interleaved
        .into_iter()
        .skip(channel)
        .step_by(n_channels)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav(w, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Wav { message, .. } => Error::Wav {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Encodes a waveform as 16-bit PCM WAV bytes.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    write_wav(w, &mut buf)?;
    Ok(buf.into_inner())
}

fn write_wav<W: std::io::Write + std::io::Seek>(w: &Waveform, sink: W) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e| wav_err(Path::new("<stream>"), e);
    let mut writer = hound::WavWriter::new(sink, spec).map_err(err)?;
    for &s in &w.samples {
        writer.write_sample(quantize_i16(s)).map_err(err)?;
    }
    writer.finalize().map_err(err)
}

fn quantize_i16(s: f64) -> i16 {
    (s * I16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported wav layout".into()),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Truncates both signals to the shorter length.
///
/// Fails if the rates differ or the lengths differ by more than `tolerance_s`.
pub fn align_pair(x: &Waveform, y_hat: &Waveform, tolerance_s: f64) -> Result<(Waveform, Waveform)> {
    if x.sample_rate != y_hat.sample_rate {
        return Err(Error::RateMismatch(x.sample_rate, y_hat.sample_rate));
    }
    let tolerance = (tolerance_s * x.sample_rate as f64).round() as usize;
    let diff = x.len().abs_diff(y_hat.len());
    if diff > tolerance {
        return Err(Error::AlignmentTolerance { diff, tolerance });
    }
    let n = x.len().min(y_hat.len());
    Ok((x.prefix(n), y_hat.prefix(n)))
}

/// Observation addition: `omega * x + (1 - omega) * y_hat`, sample by sample.
///
/// The endpoints return exact copies of the corresponding input.
pub fn oa_blend(x: &Waveform, y_hat: &Waveform, omega: f64) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid(format!("OA coefficient {omega} outside [0, 1]")));
    }
    if x.sample_rate != y_hat.sample_rate {
        return Err(Error::RateMismatch(x.sample_rate, y_hat.sample_rate));
    }
    if x.len() != y_hat.len() {
        return Err(Error::LengthMismatch(x.len(), y_hat.len()));
    }
    if omega == 1.0 {
        return Ok(x.clone());
    }
    if omega == 0.0 {
        return Ok(y_hat.clone());
    }
    let samples = x
        .samples
        .iter()
        .zip(&y_hat.samples)
        .map(|(&n, &e)| omega * n + (1.0 - omega) * e)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: x.sample_rate,
    })
}

/// Signal-to-noise ratio of `estimate` against a known clean reference, in dB.
pub fn snr_db(clean: &Waveform, estimate: &Waveform) -> Result<f64> {
    if clean.len() != estimate.len() {
        return Err(Error::LengthMismatch(clean.len(), estimate.len()));
    }
    let signal = clean.energy();
    let noise: f64 = clean
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(c, e)| (e - c).powi(2))
        .sum();
    Ok(10.0 * (signal.max(1e-20) / noise.max(1e-20)).log10())
}

/// Uniform grid of OA coefficients from 0 to 1 with step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OaGrid {
    step: f64,
    coefficients: Vec<f64>,
}

impl OaGrid {
    pub fn new(k: f64) -> Result<Self> {
        if !(k > 0.0 && k <= 0.1 + 1e-12) {
            return Err(Error::invalid(format!("OA step {k} outside (0, 0.1]")));
        }
        let inv = 1.0 / k;
        let n = inv.round();
        if (inv - n).abs() > 1e-9 {
            return Err(Error::invalid(format!("1/{k} is not an integer")));
        }
        let n = n as usize;
        // i / n rather than i * k keeps the endpoints exact and spacing within rounding error.
        let coefficients = (0..=n).map(|i| i as f64 / n as f64).collect();
        Ok(Self { step: k, coefficients })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Coefficients in ascending order.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Coefficients in descending order; index 0 is ω = 1.
    pub fn descending(&self) -> Vec<f64> {
        self.coefficients.iter().rev().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Coefficient at a descending-order index.
    pub fn at_descending(&self, index: usize) -> f64 {
        self.coefficients[self.coefficients.len() - 1 - index]
    }

    /// Grid coefficient closest to `omega`; ties go to the larger coefficient.
    pub fn nearest(&self, omega: f64) -> f64 {
        let mut best = self.coefficients[0];
        for &c in &self.coefficients {
            if (c - omega).abs() <= (best - omega).abs() {
                best = c;
            }
        }
        best
    }

    /// Short stable hash of the coefficient list, used in cache keys.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in self.descending() {
            h.update(c.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub fn oa_grid(k: f64) -> Result<OaGrid> {
    OaGrid::new(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav(samples: &[f64]) -> Waveform {
        Waveform::new(samples.to_vec(), DEFAULT_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn pcm_full_scale_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let loaded = load_wav(&path, None).unwrap();
        assert_eq!(loaded.samples()[0], 32767.0 / 32768.0);
        assert_eq!(loaded.samples()[1], 0.0);
    }

    #[test]
    fn one_second_file_has_rate_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.wav");
        save_wav(&Waveform::zeros(16000, 16000).unwrap(), &path).unwrap();
        let w = load_wav(&path, None).unwrap();
        assert_eq!(w.len(), 16000);
        assert_eq!(w.sample_rate(), 16000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn ramp_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.wav");
        let ramp: Vec<f64> = (0..100).map(|i| -1.0 + 2.0 * i as f64 / 99.0).collect();
        let w = wav(&ramp);
        save_wav(&w, &path).unwrap();
        let back = load_wav(&path, None).unwrap();
        let err = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0, "max error {err}");
    }

    #[test]
    fn channel_selection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("multi.wav");
        let spec = hound::WavSpec {
            channels: 6,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for frame in 0..10i16 {
            for ch in 0..6i16 {
                w.write_sample(frame * 100 + ch).unwrap();
            }
        }
        w.finalize().unwrap();
        let ch5 = load_wav(&path, Some(CHIME_CHANNEL_INDEX)).unwrap();
        assert_eq!(ch5.len(), 10);
        assert_eq!(ch5.samples()[3], 304.0 / 32768.0);
        assert!(matches!(
            load_wav(&path, Some(6)),
            Err(Error::ChannelAbsent { requested: 6, available: 6 })
        ));
        assert!(load_wav(&path, None).is_err());
    }

    #[test]
    fn unreadable_and_unsupported_files() {
        assert!(matches!(load_wav("/nonexistent/x.wav", None), Err(Error::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path, None), Err(Error::UnsupportedEncoding(_))));
        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"not a riff file").unwrap();
        assert!(load_wav(&garbage, None).is_err());
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let w = wav(&[0.0; 4]);
        assert!(save_wav(&w, "/nonexistent-dir/out.wav").is_err());
    }

    #[test]
    fn align_rules() {
        let a = Waveform::zeros(16000, 16000).unwrap();
        let b = Waveform::zeros(15840, 16000).unwrap();
        let (x, y) = align_pair(&a, &a, 0.5).unwrap();
        assert_eq!((x.len(), y.len()), (16000, 16000));
        let (x, y) = align_pair(&a, &b, 0.5).unwrap();
        assert_eq!((x.len(), y.len()), (15840, 15840));
        let short = Waveform::zeros(4000, 16000).unwrap();
        assert!(matches!(
            align_pair(&a, &short, 0.5),
            Err(Error::AlignmentTolerance { .. })
        ));
        let other_rate = Waveform::zeros(16000, 8000).unwrap();
        assert!(matches!(align_pair(&a, &other_rate, 0.5), Err(Error::RateMismatch(..))));
    }

    #[test]
    fn align_keeps_prefix() {
        let a = wav(&[0.1, 0.2, 0.3, 0.4]);
        let b = wav(&[0.5, 0.6, 0.7]);
        let (x, y) = align_pair(&a, &b, 0.5).unwrap();
        assert_eq!(x.samples(), &[0.1, 0.2, 0.3]);
        assert_eq!(y.samples(), b.samples());
    }

    #[test]
    fn blend_examples() {
        let x = wav(&[0.2, -0.4]);
        let y = wav(&[0.0, 0.4]);
        assert_eq!(oa_blend(&x, &y, 1.0).unwrap(), x);
        assert_eq!(oa_blend(&x, &y, 0.0).unwrap(), y);
        let mid = oa_blend(&x, &y, 0.5).unwrap();
        assert!((mid.samples()[0] - 0.1).abs() < 1e-15);
        assert!(mid.samples()[1].abs() < 1e-15);
        assert!(oa_blend(&x, &y, 1.5).is_err());
        assert!(oa_blend(&x, &y, -0.1).is_err());
        assert!(matches!(
            oa_blend(&x, &wav(&[0.0]), 0.5),
            Err(Error::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn grid_examples() {
        let g = oa_grid(0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g.coefficients()[0], 0.0);
        assert_eq!(g.coefficients()[10], 1.0);
        assert_eq!(g.descending()[0], 1.0);
        assert_eq!(g.at_descending(10), 0.0);
        assert_eq!(oa_grid(0.05).unwrap().len(), 21);
        assert!(oa_grid(0.3).is_err());
        assert!(oa_grid(0.0).is_err());
        assert!(oa_grid(0.03).is_err());
        assert_eq!(g.nearest(0.55), 0.6);
        assert_eq!(g.nearest(0.42), 0.4);
    }

    #[test]
    fn grid_is_uniform_sorted_unique() {
        for k in [0.1, 0.05, 0.025, 0.02, 0.01] {
            let g = oa_grid(k).unwrap();
            assert_eq!(g.len(), (1.0 / k).round() as usize + 1);
            assert_eq!(*g.coefficients().first().unwrap(), 0.0);
            assert_eq!(*g.coefficients().last().unwrap(), 1.0);
            for w in g.coefficients().windows(2) {
                assert!(w[1] > w[0]);
                assert!((w[1] - w[0] - k).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn blend_convexity_and_linearity(
            pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64),
            w1 in 0.0f64..=1.0,
            w2 in 0.0f64..=1.0,
        ) {
            let x = wav(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let y = wav(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let bound = x.peak().max(y.peak());
            let b1 = oa_blend(&x, &y, w1).unwrap();
            prop_assert!(b1.peak() <= bound + 1e-15);
            let b2 = oa_blend(&x, &y, w2).unwrap();
            let bm = oa_blend(&x, &y, (w1 + w2) / 2.0).unwrap();
            for i in 0..x.len() {
                let lhs = b1.samples()[i] + b2.samples()[i];
                prop_assert!((lhs - 2.0 * bm.samples()[i]).abs() <= 1e-12);
            }
        }
    }
}
