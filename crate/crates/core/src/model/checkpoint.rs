//! Self-describing checkpoint container.
//!
//! ```text
//! "OABRIDGE"            8-byte magic
//! version: u32 LE       currently 1
//! header_len: u32 LE
//! header: JSON          {model_config, config_hash, dtype, meta, tensors: [{name, shape}]}
//! payload               every tensor in header order, little-endian f64, row-major
//! crc32: u32 LE         CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OABRIDGE";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    config_hash: String,
    dtype: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pub meta: BTreeMap<String, String>,
}

pub fn encode_checkpoint(
    cfg: &ModelConfig,
    params: &Parameters,
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let tensors = params.tensors();
    let header = Header {
        model_config: cfg.clone(),
        config_hash: cfg.fingerprint(),
        dtype: "f64".into(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(20 + header.len() + 8 * params.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes a checkpoint; when `expected` is given the stored shapes must match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 {
        return Err(corrupt("file too short"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if body.len() < header_end {
        return Err(corrupt("header overruns file"));
    }
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    if header.dtype != "f64" {
        return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
    }
    if header.config_hash != header.model_config.fingerprint() {
        return Err(corrupt("config hash does not match stored config"));
    }

    let cfg = header.model_config;
    if let Some(want) = expected {
        if want != &cfg {
            // Report the first differing tensor when there is one.
            Parameters::zeros(&cfg).check_shapes(want)?;
            return Err(Error::Shape(format!(
                "checkpoint config {} differs from expected {}",
                cfg.fingerprint(),
                want.fingerprint()
            )));
        }
    }
    cfg.validate()?;

    let mut params = Parameters::zeros(&cfg);
    let layout: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if layout.len() != header.tensors.len()
        || layout
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), e)| n != &e.name || s != &e.shape)
    {
        return Err(Error::Shape("tensor table does not match model config".into()));
    }
    let payload = &body[header_end..];
    if payload.len() != 8 * params.n_params() {
        return Err(corrupt("payload size mismatch"));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    params.assign_flat(&flat)?;
    Ok(Checkpoint {
        cfg,
        params,
        meta: header.meta,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &Parameters,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(cfg, params, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> (ModelConfig, Parameters, BTreeMap<String, String>) {
        let cfg = ModelConfig::tiny();
        let params = init_params(&cfg, 9).unwrap();
        let meta = BTreeMap::from([
            ("strategy".to_string(), "combined".to_string()),
            ("epoch".to_string(), "7".to_string()),
        ]);
        (cfg, params, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, params, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &cfg, &params, &meta).unwrap();
        let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
        assert_eq!(ck.cfg, cfg);
        assert_eq!(ck.meta, meta);
        let a: Vec<u64> = params.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = ck.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let (cfg, params, meta) = sample();
        let bytes = encode_checkpoint(&cfg, &params, &meta).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 100], None).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(m) if m.contains("checksum")));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (cfg, params, meta) = sample();
        let mut bytes = encode_checkpoint(&cfg, &params, &meta).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_logits_dim_is_shape_error() {
        let (cfg, params, meta) = sample();
        let bytes = encode_checkpoint(&cfg, &params, &meta).unwrap();
        let mut other = cfg.clone();
        other.logits_dim = 21;
        assert!(matches!(decode_checkpoint(&bytes, Some(&other)), Err(Error::Shape(_))));
    }
}
