//! Single-file checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"GLORACK1"                 8-byte magic
//! manifest_len: u64 LE        length of the JSON manifest in bytes
//! manifest: JSON text         configs, metadata, tensor table
//! payload                     f64 little-endian tensors, manifest order
//! ```
//!
//! Each tensor entry records its name, group, shape, dtype (`"f64"`), byte
//! offset and length within the payload, and the FNV-1a 64-bit checksum of its
//! payload bytes as 16 lowercase hex digits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, Model, ModelConfig, ParamGroup};

pub const MAGIC: &[u8; 8] = b"GLORACK1";

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
    pub fnv1a64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub adapters: Option<AdapterConfig>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let bytes = p.tensor.to_le_bytes();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.tensor.shape().to_vec(),
            dtype: "f64".into(),
            offset: payload.len() as u64,
            nbytes: bytes.len() as u64,
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        model: model.config.clone(),
        adapters: model.adapters.clone(),
        metadata: metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    Ok((manifest, &bytes[end..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, BTreeMap<String, String>)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let base = Model::new_base(manifest.model.clone(), 0)?;
    let mut model = match &manifest.adapters {
        Some(a) => base.with_adapters(a.clone(), 0)?,
        None => base,
    };
    if manifest.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
        }
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        let (start, end) = (entry.offset as usize, (entry.offset + entry.nbytes) as usize);
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload of {} out of bounds", entry.name)))?;
        let sum = format!("{:016x}", fnv1a64(raw));
        if sum != entry.fnv1a64 {
            return Err(Error::Integrity(format!(
                "checksum mismatch for {}: manifest {}, payload {sum}",
                entry.name, entry.fnv1a64
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected = model.params.param(id);
        if expected.tensor.shape() != entry.shape.as_slice() || expected.group != entry.group {
            return Err(Error::Checkpoint(format!("shape or group mismatch for {}", entry.name)));
        }
        *model.params.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok((model, manifest.metadata))
}

pub fn save(model: &Model, path: impl AsRef<Path>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(model, metadata)?;
    if let Some(parent) = path.as_ref().parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    from_bytes(&bytes)
}
