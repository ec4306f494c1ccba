//! Self-describing checkpoint archive.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header,
//! little-endian f64 payload in header order, then a SHA-256 of everything
//! before it. The digest doubles as the checkpoint id. Files are written
//! through a temporary and renamed, and any truncation or corruption fails
//! the digest check before a single tensor is built.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterStore};
use crate::tensor::Tensor;
use crate::training::AdamState;

const MAGIC: &[u8; 8] = b"CCLIPCKP";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Free-form string tags such as `stage` and `scarce_category`.
    pub tags: BTreeMap<String, String>,
    /// Arbitrary JSON carried alongside (history, training config).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            epoch: 0,
            tags: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    epoch: usize,
    adam_step: Option<u64>,
    tags: BTreeMap<String, String>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor)> = ckpt
        .model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(opt.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
        tensors.extend(opt.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
    }
    let header = Header {
        model_config: ckpt.model.config.clone(),
        epoch: ckpt.epoch,
        adam_step: ckpt.optimizer.as_ref().map(|o| o.step),
        tags: ckpt.tags.clone(),
        meta: ckpt.meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + header.len() + payload_len + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes `ckpt` atomically and returns its id.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = encode(ckpt)?;
    write_atomic(path, &bytes)?;
    Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
}

/// Reads a checkpoint and returns it with its id.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<(Checkpoint, String)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch (truncated or corrupted file)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    let payload = &body[header_end..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if expected != payload.len() {
        return Err(bad("payload length does not match tensor index"));
    }

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut offset = 0;
    for entry in header.tensors {
        let n = entry.rows * entry.cols;
        let data = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 8;
        let t = Tensor::from_vec(entry.rows, entry.cols, data);
        let target = if let Some(name) = entry.name.strip_prefix(M_PREFIX) {
            m.insert(name.to_string(), t)
        } else if let Some(name) = entry.name.strip_prefix(V_PREFIX) {
            v.insert(name.to_string(), t)
        } else {
            params.insert(entry.name.clone(), t)
        };
        if target.is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
    }
    let model = Model::new(header.model_config, ParameterStore::from_map(params))?;
    let optimizer = match header.adam_step {
        Some(step) => {
            let state = AdamState { step, m, v };
            state.check_against(&model.params)?;
            Some(state)
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(bad("optimizer moments without a step count")),
    };
    Ok((
        Checkpoint {
            model,
            optimizer,
            epoch: header.epoch,
            tags: header.tags,
            meta: header.meta,
        },
        hex::encode(digest),
    ))
}
