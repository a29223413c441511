//! Adapters for the frozen enhancer, recognizer and quality scorer.
//!
//! Real models are reached through precomputed files, an external command or
//! an HTTP endpoint. Deterministic built-in stand-ins cover tests and demos.

mod builtin;
mod external;
mod http;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use builtin::{
    FnRecognizer, IdentityEnhancer, PrecomputedEnhancer, ScriptEntry, ScriptedRecognizer,
    SpectralSubtraction, SyntheticScorer,
};
pub use external::{parse_scorer_output, CommandEnhancer, CommandRecognizer, CommandScorer};
pub use http::{HttpEnhancer, HttpRecognizer, HttpScorer};

use crate::audio::{OaGrid, Waveform};
use crate::error::{Error, Result};
use crate::manifest::ManifestRecord;
use crate::supervision::MosScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Enhancer,
    Recognizer,
    Scorer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendMode {
    Builtin,
    Precomputed,
    ExternalCommand,
    Http,
}

/// Names and configures one backend. The id enters every cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub id: String,
    pub mode: BackendMode,
    /// Built-in implementation: `identity`, `spectral-subtraction`,
    /// `synthetic-snr` or `scripted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    /// Command template for `external-command` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Endpoint for `http` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Lookup table for the scripted recognizer (JSON-Lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

impl BackendDescriptor {
    pub fn builtin(kind: BackendKind, id: &str, name: &str) -> Self {
        Self {
            kind,
            id: id.into(),
            mode: BackendMode::Builtin,
            builtin: Some(name.into()),
            command: None,
            url: None,
            table: None,
            timeout_s: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backend {:?}: {m}", self.id)));
        if self.id.trim().is_empty() {
            return bad("id must be non-empty");
        }
        match self.mode {
            BackendMode::Builtin if self.builtin.is_none() => bad("builtin mode needs `builtin`"),
            BackendMode::ExternalCommand if self.command.is_none() => {
                bad("external-command mode needs `command`")
            }
            BackendMode::Http if self.url.is_none() => bad("http mode needs `url`"),
            BackendMode::Precomputed if self.kind != BackendKind::Enhancer => {
                bad("precomputed mode only applies to enhancers")
            }
            _ => Ok(()),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s.unwrap_or(300.0))
    }

    fn expect_kind(&self, kind: BackendKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::Config(format!(
                "backend {:?} is a {:?}, not a {kind:?}",
                self.id, self.kind
            )));
        }
        Ok(())
    }

    pub fn build_enhancer(&self) -> Result<Arc<dyn Enhancer>> {
        self.expect_kind(BackendKind::Enhancer)?;
        Ok(match self.mode {
            BackendMode::Builtin => match self.builtin.as_deref().unwrap() {
                "identity" => Arc::new(IdentityEnhancer::new(&self.id)),
                "spectral-subtraction" => Arc::new(SpectralSubtraction::new(&self.id)),
                other => return Err(Error::Config(format!("unknown builtin enhancer {other:?}"))),
            },
            BackendMode::Precomputed => Arc::new(PrecomputedEnhancer::new(&self.id)),
            BackendMode::ExternalCommand => Arc::new(CommandEnhancer::new(
                &self.id,
                self.command.as_deref().unwrap(),
                self.timeout(),
            )),
            BackendMode::Http => Arc::new(HttpEnhancer::new(&self.id, self.url.as_deref().unwrap(), self.timeout())),
        })
    }

    /// `grid` sets the coefficients the scripted recognizer snaps to.
    pub fn build_recognizer(&self, grid: &OaGrid) -> Result<Arc<dyn Recognizer>> {
        self.expect_kind(BackendKind::Recognizer)?;
        Ok(match self.mode {
            BackendMode::Builtin => match self.builtin.as_deref().unwrap() {
                "scripted" => {
                    let table = self.table.as_ref().ok_or_else(|| {
                        Error::Config(format!("scripted recognizer {:?} needs `table`", self.id))
                    })?;
                    Arc::new(ScriptedRecognizer::from_file(&self.id, table, grid.clone())?)
                }
                other => return Err(Error::Config(format!("unknown builtin recognizer {other:?}"))),
            },
            BackendMode::ExternalCommand => Arc::new(CommandRecognizer::new(
                &self.id,
                self.command.as_deref().unwrap(),
                self.timeout(),
            )),
            BackendMode::Http => Arc::new(HttpRecognizer::new(&self.id, self.url.as_deref().unwrap(), self.timeout())),
            BackendMode::Precomputed => unreachable!("rejected by validate"),
        })
    }

    pub fn build_scorer(&self) -> Result<Arc<dyn Scorer>> {
        self.expect_kind(BackendKind::Scorer)?;
        Ok(match self.mode {
            BackendMode::Builtin => match self.builtin.as_deref().unwrap() {
                "synthetic-snr" => Arc::new(SyntheticScorer::new(&self.id)),
                other => return Err(Error::Config(format!("unknown builtin scorer {other:?}"))),
            },
            BackendMode::ExternalCommand => Arc::new(CommandScorer::new(
                &self.id,
                self.command.as_deref().unwrap(),
                self.timeout(),
            )),
            BackendMode::Http => Arc::new(HttpScorer::new(&self.id, self.url.as_deref().unwrap(), self.timeout())),
            BackendMode::Precomputed => unreachable!("rejected by validate"),
        })
    }
}

/// Frozen speech enhancement front-end.
pub trait Enhancer: Send + Sync {
    fn id(&self) -> &str;
    /// Enhances the noisy waveform `x` of `rec`; the output keeps x's rate.
    fn enhance(&self, rec: &ManifestRecord, x: &Waveform) -> Result<Waveform>;
}

/// What a recognizer is asked to transcribe.
#[derive(Debug, Clone, Copy)]
pub struct RecognitionRequest<'a> {
    pub utt_id: &'a str,
    /// OA coefficient used to produce `audio`, when known.
    pub omega: Option<f64>,
    pub audio: &'a Waveform,
}

/// Frozen ASR back-end.
pub trait Recognizer: Send + Sync {
    fn id(&self) -> &str;
    fn transcribe(&self, req: &RecognitionRequest<'_>) -> Result<String>;
}

/// Non-intrusive quality estimator.
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, rec: &ManifestRecord, w: &Waveform) -> Result<MosScore>;
}

/// The three frozen components of a pipeline.
#[derive(Clone)]
pub struct Backends {
    pub enhancer: Arc<dyn Enhancer>,
    pub recognizer: Arc<dyn Recognizer>,
    pub scorer: Option<Arc<dyn Scorer>>,
}

impl Backends {
    pub fn new(enhancer: Arc<dyn Enhancer>, recognizer: Arc<dyn Recognizer>) -> Self {
        Self {
            enhancer,
            recognizer,
            scorer: None,
        }
    }
}

pub fn enhance(rec: &ManifestRecord, x: &Waveform, d: &BackendDescriptor) -> Result<Waveform> {
    d.build_enhancer()?.enhance(rec, x)
}

pub fn transcribe(req: &RecognitionRequest<'_>, d: &BackendDescriptor, grid: &OaGrid) -> Result<String> {
    d.build_recognizer(grid)?.transcribe(req)
}

pub fn score(rec: &ManifestRecord, w: &Waveform, d: &BackendDescriptor) -> Result<MosScore> {
    d.build_scorer()?.score(rec, w)
}

pub(crate) fn backend_err(backend: &str, utt_id: &str, message: impl Into<String>) -> Error {
    Error::Backend {
        backend: backend.to_string(),
        utt_id: utt_id.to_string(),
        message: message.into(),
    }
}

/// Checks an enhancer's output against its input.
pub(crate) fn check_enhanced(backend: &str, utt_id: &str, x: &Waveform, y: &Waveform) -> Result<()> {
    if x.sample_rate() != y.sample_rate() {
        return Err(backend_err(
            backend,
            utt_id,
            format!("output rate {} Hz differs from input {} Hz", y.sample_rate(), x.sample_rate()),
        ));
    }
    Ok(())
}
