//! JSON-Lines utterance manifests.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audio::{load_wav, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Simulated,
    Real,
}

/// Dataset role such as `tr_simu` or `et_real`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset {
    pub split: Split,
    pub condition: Condition,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            Split::Train => "tr",
            Split::Dev => "dt",
            Split::Eval => "et",
        };
        let cond = match self.condition {
            Condition::Simulated => "simu",
            Condition::Real => "real",
        };
        write!(f, "{split}_{cond}")
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (split, cond) = s
            .split_once('_')
            .ok_or_else(|| Error::Manifest(format!("bad subset tag {s:?}")))?;
        let split = match split {
            "tr" => Split::Train,
            "dt" => Split::Dev,
            "et" => Split::Eval,
            other => return Err(Error::Manifest(format!("unknown split {other:?}"))),
        };
        let condition = match cond {
            "simu" => Condition::Simulated,
            "real" => Condition::Real,
            other => return Err(Error::Manifest(format!("unknown condition {other:?}"))),
        };
        Ok(Self { split, condition })
    }
}

impl Serialize for Subset {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Subset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub noisy_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub subset: Subset,
    /// Channel to read from a multi-channel noisy file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
    /// Clean reference, when one exists (simulated data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<PathBuf>,
    /// Known mixing SNR in dB, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

impl ManifestRecord {
    pub fn load_noisy(&self) -> Result<Waveform> {
        load_wav(&self.noisy_path, self.channel)
    }

    pub fn transcript(&self) -> Result<&str> {
        self.transcript
            .as_deref()
            .ok_or_else(|| Error::Manifest(format!("utterance {} has no transcript", self.utt_id)))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utt_id {}", r.utt_id)));
            }
        }
        Ok(Self { records })
    }

    /// Reads a manifest; relative paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            for p in [Some(&mut rec.noisy_path), rec.enhanced_path.as_mut(), rec.clean_path.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter_subsets(&self, subsets: &[Subset]) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| subsets.contains(&r.subset))
                .cloned()
                .collect(),
        }
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }
}
