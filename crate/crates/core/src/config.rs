//! TOML configuration covering features, model, training and backends.
//!
//! Any key can be overridden with `section.key=value`, where `value` is
//! parsed as a TOML value and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::OaGrid;
use crate::backends::{BackendDescriptor, BackendKind};
use crate::cache::cache_root;
use crate::error::{Error, Result};
use crate::features::FbankConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub enhancer: BackendDescriptor,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recognizer: Option<BackendDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<BackendDescriptor>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            enhancer: BackendDescriptor::builtin(BackendKind::Enhancer, "toy-ss", "spectral-subtraction"),
            recognizer: None,
            scorer: Some(BackendDescriptor::builtin(BackendKind::Scorer, "synthetic-snr", "synthetic-snr")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root of the WER, target and feature caches; `BRIDGE_OA_CACHE_DIR`
    /// takes precedence.
    pub cache_dir: PathBuf,
    pub fbank: FbankConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub backends: BackendsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            cache_dir: PathBuf::from("oa-cache"),
            fbank: FbankConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            backends: BackendsConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` if given, otherwise starts from defaults, then applies
    /// `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Returns a copy with one `dotted.key=value` assignment applied.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (leaf, path) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for part in path {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: parent is not a section")))?
            .insert(leaf.to_string(), value);
        root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let grid = OaGrid::new(self.train.k)?;
        if self.model.logits_dim != grid.len() {
            return Err(Error::Config(format!(
                "model.logits_dim = {} but train.k = {} gives {} coefficients",
                self.model.logits_dim,
                self.train.k,
                grid.len()
            )));
        }
        if self.model.n_mels != self.fbank.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels = {} but fbank.n_mels = {}",
                self.model.n_mels, self.fbank.n_mels
            )));
        }
        self.backends.enhancer.validate()?;
        for d in self.backends.recognizer.iter().chain(&self.backends.scorer) {
            d.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<OaGrid> {
        OaGrid::new(self.train.k)
    }

    pub fn cache_root(&self) -> PathBuf {
        cache_root(&self.cache_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Strategy;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_every_section() {
        let cfg = Config::load(
            None,
            &[
                "train.strategy=ri".into(),
                "train.lr_peak=0.001".into(),
                "model.conv_channels=32".into(),
                "fbank.mel_high_hz=7600".into(),
                "backends.enhancer.id=frcrn".into(),
                "cache_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.strategy, Strategy::Ri);
        assert_eq!(cfg.train.lr_peak, 0.001);
        assert_eq!(cfg.model.conv_channels, 32);
        assert_eq!(cfg.fbank.mel_high_hz, Some(7600.0));
        assert_eq!(cfg.backends.enhancer.id, "frcrn");
        assert_eq!(cfg.cache_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let cfg = Config::default();
        assert!(cfg.with_override("train.nonsense=1").is_err());
        assert!(cfg.with_override("train.lr_peak").is_err());
        assert!(cfg.with_override("train.max_epochs=\"many\"").is_err());
        assert!(Config::load(None, &["train.k=0.05".into()]).is_err());
        assert!(Config::load(None, &["train.k=0.05".into(), "model.logits_dim=21".into()]).is_ok());
    }

    #[test]
    fn file_sections() {
        let cfg = Config::from_toml(
            r#"
            [train]
            strategy = "pq"
            max_epochs = 3

            [backends.recognizer]
            kind = "recognizer"
            id = "whisper-small"
            mode = "http"
            url = "http://localhost:8000/asr"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.backends.recognizer.unwrap().id, "whisper-small");
    }
}
