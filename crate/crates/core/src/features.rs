//! Log-mel filterbank features and SpecAugment-style masking.

use std::path::PathBuf;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_low_hz: f64,
    /// Upper band edge; `None` means Nyquist.
    pub mel_high_hz: Option<f64>,
    /// Energies are clamped to this value before the logarithm.
    pub energy_floor: f64,
    pub pre_emphasis: Option<f64>,
    /// Subtract the per-utterance mean of each mel channel.
    pub mean_norm: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_low_hz: 20.0,
            mel_high_hz: None,
            energy_floor: 1e-10,
            pre_emphasis: None,
            mean_norm: false,
        }
    }
}

impl FbankConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames produced for `n_samples` input samples.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let win = self.window_samples(sample_rate);
        if n_samples < win {
            0
        } else {
            (n_samples - win) / self.hop_samples(sample_rate) + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if !(self.window_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::invalid("need window_ms > hop_ms > 0"));
        }
        if self.hop_samples(sample_rate) == 0 {
            return Err(Error::invalid("hop shorter than one sample"));
        }
        if self.fft_size < self.window_samples(sample_rate) {
            return Err(Error::invalid(format!(
                "fft_size {} smaller than window of {} samples",
                self.fft_size,
                self.window_samples(sample_rate)
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let high = self.mel_high_hz.unwrap_or(nyquist);
        if !(self.mel_low_hz >= 0.0 && high > self.mel_low_hz && high <= nyquist) {
            return Err(Error::invalid("mel band edges must satisfy 0 <= low < high <= Nyquist"));
        }
        if !(self.energy_floor > 0.0) {
            return Err(Error::invalid("energy floor must be positive"));
        }
        Ok(())
    }

    /// Stable hash of every field, used to key feature caches.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Log-mel energies laid out as mel bins × frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { values })
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the power-spectrum bins, `n_mels × (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &FbankConfig, sample_rate: u32) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let high = cfg.mel_high_hz.unwrap_or(sample_rate as f64 / 2.0);
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.mel_low_hz), hz_to_mel(high));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;

    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Computes natural-log mel filterbank energies.
pub fn fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    let sr = w.sample_rate();
    cfg.validate(sr)?;
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    if w.len() < win {
        return Err(Error::invalid(format!(
            "waveform of {} samples shorter than one {win}-sample window",
            w.len()
        )));
    }

    let signal: Vec<f64> = match cfg.pre_emphasis {
        Some(a) => {
            let s = w.samples();
            std::iter::once(s[0])
                .chain(s.windows(2).map(|p| p[1] - a * p[0]))
                .collect()
        }
        None => w.samples().to_vec(),
    };

    let n_frames = cfg.n_frames(w.len(), sr);
    let n_bins = cfg.fft_size / 2 + 1;
    let window = hann(win);
    let filters = mel_filterbank(cfg, sr);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);

    let mut power = Array2::<f64>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(signal[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[k, t]] = buf[k].norm_sqr();
        }
    }

    let mut values = filters.dot(&power);
    values.mapv_inplace(|e| e.max(cfg.energy_floor).ln());
    if cfg.mean_norm {
        for mut row in values.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            row -= mean;
        }
    }
    FeatureMatrix::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub max_time_mask_frames: usize,
    pub max_freq_mask_channels: usize,
    pub masks_per_axis: usize,
    pub mask_value: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_time_mask_frames: 5,
            max_freq_mask_channels: 4,
            masks_per_axis: 1,
            mask_value: 0.0,
        }
    }
}

/// A contiguous band `[start, start + width)` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpan {
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    pub time: Vec<MaskSpan>,
    pub freq: Vec<MaskSpan>,
}

pub fn spec_augment(f: &FeatureMatrix, policy: &AugmentPolicy, seed: u64) -> FeatureMatrix {
    spec_augment_with_masks(f, policy, seed).0
}

/// Like [`spec_augment`], also reporting where the masks landed.
pub fn spec_augment_with_masks(
    f: &FeatureMatrix,
    policy: &AugmentPolicy,
    seed: u64,
) -> (FeatureMatrix, AppliedMasks) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = f.values.clone();
    let (n_mels, n_frames) = values.dim();
    let mut masks = AppliedMasks::default();

    let draw = |rng: &mut ChaCha8Rng, max: usize, extent: usize| {
        let width = rng.random_range(0..=max).min(extent);
        let start = rng.random_range(0..=extent - width);
        MaskSpan { start, width }
    };

    for _ in 0..policy.masks_per_axis {
        let span = draw(&mut rng, policy.max_time_mask_frames, n_frames);
        values
            .slice_mut(s![.., span.start..span.start + span.width])
            .fill(policy.mask_value);
        masks.time.push(span);

        let span = draw(&mut rng, policy.max_freq_mask_channels, n_mels);
        values
            .slice_mut(s![span.start..span.start + span.width, ..])
            .fill(policy.mask_value);
        masks.freq.push(span);
    }
    (FeatureMatrix { values }, masks)
}

/// Directory of per-utterance feature matrices keyed by utterance id and config hash.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

const FEATURE_MAGIC: &[u8; 8] = b"OAFBANK1";

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, utt_id: &str, stream: &str, cfg: &FbankConfig) -> PathBuf {
        self.root
            .join(cfg.fingerprint())
            .join(format!("{}.{stream}.fbk", sanitize(utt_id)))
    }

    pub fn load(&self, utt_id: &str, stream: &str, cfg: &FbankConfig) -> Option<FeatureMatrix> {
        let bytes = std::fs::read(self.path_for(utt_id, stream, cfg)).ok()?;
        decode_features(&bytes).ok()
    }

    pub fn store(&self, utt_id: &str, stream: &str, cfg: &FbankConfig, f: &FeatureMatrix) -> Result<()> {
        let path = self.path_for(utt_id, stream, cfg);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, encode_features(f)).map_err(|e| Error::io(&path, e))
    }

    /// Returns the cached matrix or computes and stores it.
    pub fn get_or_compute(
        &self,
        utt_id: &str,
        stream: &str,
        cfg: &FbankConfig,
        compute: impl FnOnce() -> Result<FeatureMatrix>,
    ) -> Result<FeatureMatrix> {
        if let Some(f) = self.load(utt_id, stream, cfg) {
            return Ok(f);
        }
        let f = compute()?;
        self.store(utt_id, stream, cfg, &f)?;
        Ok(f)
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * f.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(f.n_mels() as u32).to_le_bytes());
    out.extend_from_slice(&(f.n_frames() as u32).to_le_bytes());
    for v in f.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let bad = |m: &str| Error::Checkpoint(format!("feature file: {m}"));
    if bytes.len() < 20 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("bad header"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let rows = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let payload = &body[16..];
    if payload.len() != rows * cols * 8 {
        return Err(bad("payload size"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?)
}
