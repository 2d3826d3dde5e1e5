//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `EVOCKPT1`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every array's `f64` values in
//! little-endian order. The header names each array with its shape and its offset (in
//! values) into the data block, and carries the model config plus free-form metadata.

use std::io::Write;
use std::path::Path;

use evoedit_core::model::{ModelConfig, ModelParams};
use evoedit_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"EVOCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

/// Serializes parameters and metadata to bytes.
pub fn encode(params: &ModelParams, meta: &serde_json::Value) -> Vec<u8> {
    let mut offset = 0;
    let arrays = params
        .tensor_names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        arrays,
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Data(format!("checkpoint: {}", msg.into()))
}

/// Parses bytes written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(ModelParams, serde_json::Value)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..data_start]).map_err(|e| bad(format!("header: {e}")))?;
    let data = &bytes[data_start..];
    if !data.len().is_multiple_of(8) {
        return Err(bad("data block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut named = Vec::with_capacity(header.arrays.len());
    for a in header.arrays {
        let n: usize = a.shape.iter().product();
        let slice = values
            .get(a.offset..a.offset + n)
            .ok_or_else(|| bad(format!("array {} runs past the data block", a.name)))?;
        let t = Tensor::new(a.shape, slice.to_vec()).map_err(|e| bad(e.to_string()))?;
        named.push((a.name, t));
    }
    let params = ModelParams::from_named(&header.config, named).map_err(|e| bad(e.to_string()))?;
    Ok((params, header.meta))
}

pub fn save(path: &Path, params: &ModelParams, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(params, meta);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
    f.write_all(&bytes).map_err(CliError::io(&tmp))?;
    f.sync_all().map_err(CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn load(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// SHA-256 of the encoded parameters alone, independent of metadata.
pub fn params_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for t in params.tensors() {
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: 20,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 8,
            max_seq_len: 6,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let meta = serde_json::json!({"edits_applied": 7});
        let (q, m) = decode(&encode(&p, &meta)).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(p.config, q.config);
        assert_eq!(m, meta);
        assert_eq!(params_hash(&p), params_hash(&q));
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let p = params();
        let bytes = encode(&p, &serde_json::Value::Null);
        assert!(matches!(decode(&bytes[..10]), Err(CliError::Data(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 8]), Err(CliError::Data(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong), Err(CliError::Data(_))));
    }
}
