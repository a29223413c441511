//! Python bindings: blending, features, losses, WER and the bridging network.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use oa_bridge::audio::{self, OaGrid as CoreGrid, Waveform};
use oa_bridge::features::{self, FbankConfig};
use oa_bridge::manifest::Manifest;
use oa_bridge::model::{self, BridgingNet as CoreNet, ModelConfig};
use oa_bridge::pipeline::{self, pair_features};
use oa_bridge::supervision::{self, normalize_text, MosScore};
use oa_bridge::training::{select_omega, Strategy};

create_exception!(oabridge, OaBridgeError, PyException);

fn err(e: oa_bridge::Error) -> PyErr {
    OaBridgeError::new_err(e.to_string())
}

fn wave(samples: Vec<f64>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).map_err(err)
}

/// `omega * x + (1 - omega) * y`, sample by sample.
#[pyfunction]
#[pyo3(signature = (x, y, omega, sample_rate = 16000))]
fn oa_blend(x: Vec<f64>, y: Vec<f64>, omega: f64, sample_rate: u32) -> PyResult<Vec<f64>> {
    let out = audio::oa_blend(&wave(x, sample_rate)?, &wave(y, sample_rate)?, omega).map_err(err)?;
    Ok(out.into_samples())
}

/// Reads a WAV file as floats in [-1, 1]; returns `(samples, sample_rate)`.
#[pyfunction]
#[pyo3(signature = (path, channel = None))]
fn load_wav(path: &str, channel: Option<usize>) -> PyResult<(Vec<f64>, u32)> {
    let w = audio::load_wav(path, channel).map_err(err)?;
    let sr = w.sample_rate();
    Ok((w.into_samples(), sr))
}

/// Writes mono 16-bit PCM.
#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = 16000))]
fn save_wav(path: &str, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    audio::save_wav(&wave(samples, sample_rate)?, path).map_err(err)
}

/// Log-mel filterbank, one row per mel band.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000))]
fn fbank(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let f = features::fbank(&wave(samples, sample_rate)?, &FbankConfig::default()).map_err(err)?;
    Ok(f.values().rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn pq_target(sig: f64, bak: f64) -> PyResult<f64> {
    Ok(supervision::pq_target(MosScore::new(sig, bak).map_err(err)?))
}

#[pyfunction]
fn loss_pq(omega_hat: f64, target: f64) -> f64 {
    supervision::loss_pq(omega_hat, target)
}

#[pyfunction]
fn loss_ri(logits: Vec<f64>, wers: Vec<f64>) -> PyResult<f64> {
    supervision::loss_ri(&logits, &wers).map_err(err)
}

/// Word error rate after case and punctuation normalization.
#[pyfunction]
fn wer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    supervision::wer(&normalize_text(reference), &normalize_text(hypothesis)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (omegas, bins = 10))]
fn histogram(omegas: Vec<f64>, bins: usize) -> PyResult<Vec<usize>> {
    pipeline::histogram(&omegas, bins).map_err(err)
}

/// Manifest records as dictionaries.
#[pyfunction]
fn load_manifest<'py>(py: Python<'py>, path: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let m = Manifest::load(path).map_err(err)?;
    m.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("utt_id", &r.utt_id)?;
            d.set_item("noisy_path", r.noisy_path.to_string_lossy())?;
            d.set_item("enhanced_path", r.enhanced_path.as_ref().map(|p| p.to_string_lossy()))?;
            d.set_item("transcript", r.transcript.as_deref())?;
            d.set_item("subset", r.subset.to_string())?;
            d.set_item("channel", r.channel)?;
            d.set_item("snr_db", r.snr_db)?;
            Ok(d)
        })
        .collect()
}

/// Uniform grid of blending coefficients with step `k`.
#[pyclass(name = "OaGrid", frozen)]
struct OaGrid(CoreGrid);

#[pymethods]
impl OaGrid {
    #[new]
    #[pyo3(signature = (k = 0.1))]
    fn new(k: f64) -> PyResult<Self> {
        CoreGrid::new(k).map(Self).map_err(err)
    }

    /// Ascending coefficients.
    fn coefficients(&self) -> Vec<f64> {
        self.0.coefficients().to_vec()
    }

    /// Descending coefficients; index 0 is ω = 1.
    fn descending(&self) -> Vec<f64> {
        self.0.descending()
    }

    fn nearest(&self, omega: f64) -> f64 {
        self.0.nearest(omega)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("OaGrid(k={})", self.0.step())
    }
}

/// The bridging network, with its grid and filterbank settings.
#[pyclass(name = "BridgingNet")]
struct BridgingNet {
    net: CoreNet,
    grid: CoreGrid,
    fbank: FbankConfig,
    meta: BTreeMap<String, String>,
}

impl BridgingNet {
    fn features(&self, noisy: Vec<f64>, enhanced: Vec<f64>, sample_rate: u32) -> PyResult<model::ForwardOutput> {
        let (n, e) = pair_features(&wave(noisy, sample_rate)?, &wave(enhanced, sample_rate)?, &self.fbank).map_err(err)?;
        self.net.forward(&n, &e).map_err(err)
    }
}

#[pymethods]
impl BridgingNet {
    /// Freshly initialized network; `tiny` selects a narrow configuration.
    #[new]
    #[pyo3(signature = (seed = 0, k = 0.1, tiny = false))]
    fn new(seed: u64, k: f64, tiny: bool) -> PyResult<Self> {
        let grid = CoreGrid::new(k).map_err(err)?;
        let mut cfg = if tiny { ModelConfig::tiny() } else { ModelConfig::default() };
        cfg.logits_dim = grid.len();
        Ok(Self {
            net: CoreNet::init(cfg, seed).map_err(err)?,
            grid,
            fbank: FbankConfig::default(),
            meta: BTreeMap::new(),
        })
    }

    /// Loads a checkpoint written by training.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = model::load_checkpoint(path, None).map_err(err)?;
        let k = ck.meta.get("k").and_then(|v| v.parse().ok()).unwrap_or(0.1);
        let fbank = match ck.meta.get("fbank") {
            Some(s) => serde_json::from_str(s).map_err(|e| OaBridgeError::new_err(format!("bad fbank metadata: {e}")))?,
            None => FbankConfig::default(),
        };
        Ok(Self {
            net: CoreNet::new(ck.cfg, ck.params).map_err(err)?,
            grid: CoreGrid::new(k).map_err(err)?,
            fbank,
            meta: ck.meta,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut meta = self.meta.clone();
        meta.insert("k".into(), self.grid.step().to_string());
        model::save_checkpoint(path, &self.net.cfg, &self.net.params, &meta).map_err(err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.net.params.n_params()
    }

    /// Checkpoint metadata such as the training strategy.
    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.meta.clone()
    }

    /// Returns `(omega_hat, logits)` for a noisy/enhanced waveform pair.
    #[pyo3(signature = (noisy, enhanced, sample_rate = 16000))]
    fn forward(&self, noisy: Vec<f64>, enhanced: Vec<f64>, sample_rate: u32) -> PyResult<(f64, Vec<f64>)> {
        let out = self.features(noisy, enhanced, sample_rate)?;
        Ok((out.omega_hat, out.logits))
    }

    /// Coefficient chosen by `strategy` (`pq`, `ri` or `combined`).
    #[pyo3(signature = (noisy, enhanced, strategy = "combined", sample_rate = 16000))]
    fn predict_omega(&self, noisy: Vec<f64>, enhanced: Vec<f64>, strategy: &str, sample_rate: u32) -> PyResult<f64> {
        let strategy: Strategy = strategy.parse().map_err(err)?;
        let out = self.features(noisy, enhanced, sample_rate)?;
        select_omega(&out, strategy, &self.grid).map_err(err)
    }
}

#[pymodule]
fn oabridge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OaBridgeError", m.py().get_type::<OaBridgeError>())?;
    m.add_class::<OaGrid>()?;
    m.add_class::<BridgingNet>()?;
    m.add_function(wrap_pyfunction!(oa_blend, m)?)?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add_function(wrap_pyfunction!(fbank, m)?)?;
    m.add_function(wrap_pyfunction!(pq_target, m)?)?;
    m.add_function(wrap_pyfunction!(loss_pq, m)?)?;
    m.add_function(wrap_pyfunction!(loss_ri, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    Ok(())
}
