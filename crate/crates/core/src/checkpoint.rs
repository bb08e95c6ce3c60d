//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CTXCKPT1`, a little-endian `u64` header
//! length, a JSON header (format version, artifact kind, free-form
//! metadata, tensor index), then every tensor as little-endian `f64` in
//! index order. Tensors are stored in name order, so equal contents give
//! byte-identical files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"CTXCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint whose metadata is still untyped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad {} metadata: {e}", self.kind)))
    }
}

/// SHA-256 over every name, shape and value, in name order.
pub fn param_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, m) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(kind: &str, meta: &impl Serialize, params: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_owned(),
        meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?,
        tensors: params
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in params.iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut data = &bytes[16 + len..];
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        if data.len() < n * 8 {
            return Err(Error::Checkpoint(format!("truncated tensor `{}`", t.name)));
        }
        let values: Vec<f64> = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        if params.contains(&t.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
        }
        params.insert(t.name.clone(), Mat::from_vec(t.rows, t.cols, values));
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        params,
    })
}

pub fn save(path: &Path, kind: &str, meta: &impl Serialize, params: &ParamStore) -> Result<()> {
    let bytes = to_bytes(kind, meta, params)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks that it holds the expected kind.
pub fn load(path: &Path, kind: &str) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = from_bytes(&bytes)?;
    if c.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            c.kind
        )));
    }
    Ok(c)
}
