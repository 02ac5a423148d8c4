//! Binary tensor container.
//!
//! Layout: 8-byte magic, u32 little-endian manifest length, UTF-8 JSON
//! manifest, raw blob. The manifest is an object whose `tensors` member maps
//! each name to `{dtype: "f32", shape: [r, c], offset, byte_len}`; offsets are
//! relative to the blob start and multiples of 64. The manifest is padded
//! with trailing spaces so the blob itself starts on a 64-byte boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::tensor::Tensor2D;

pub const MODEL_MAGIC: &[u8; 8] = b"PLABMDL1";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub byte_len: usize,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Writes `header` (a JSON object) plus the tensor table and blob.
pub fn write_container(path: &Path, magic: &[u8; 8], header: Value, tensors: &[(String, Tensor2D<f32>)]) -> Result<()> {
    let Value::Object(mut manifest) = header else {
        return Err(Error::Input("container header must be a JSON object".into()));
    };
    let mut table = serde_json::Map::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let byte_len = t.data().len() * 4;
        let entry = ContainerEntry { dtype: "f32".into(), shape: t.shape(), offset, byte_len };
        if table.insert(name.clone(), serde_json::to_value(entry)?).is_some() {
            return Err(Error::Input(format!("duplicate tensor name `{name}`")));
        }
        offset = align_up(offset + byte_len);
    }
    manifest.insert("tensors".into(), Value::Object(table));
    let mut json = serde_json::to_vec(&Value::Object(manifest))?;
    let padded = align_up(12 + json.len()) - 12;
    json.resize(padded, b' ');
    let manifest_len = u32::try_from(json.len()).map_err(|_| Error::Input("manifest exceeds 4 GiB".into()))?;

    let mut bytes = Vec::with_capacity(12 + json.len() + offset);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&manifest_len.to_le_bytes());
    bytes.extend_from_slice(&json);
    let blob_start = bytes.len();
    for (_, t) in tensors {
        let start = align_up(bytes.len() - blob_start) + blob_start;
        bytes.resize(start, 0);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a container; returns the manifest minus its tensor
/// table, and the decoded tensors by name.
pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Value, BTreeMap<String, Tensor2D<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Load(format!("{}: file too short", path.display())));
    }
    if bytes[..7] != magic[..7] {
        return Err(Error::Load(format!("{}: bad magic", path.display())));
    }
    if bytes[7] != magic[7] {
        return Err(Error::Load(format!("{}: unsupported container version `{}`", path.display(), bytes[7] as char)));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let blob_start = 12 + manifest_len;
    if bytes.len() < blob_start {
        return Err(Error::Load(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Value = serde_json::from_slice(&bytes[12..blob_start])
        .map_err(|e| Error::Load(format!("{}: manifest is not valid JSON: {e}", path.display())))?;
    let Value::Object(mut manifest) = manifest else {
        return Err(Error::Load("manifest is not a JSON object".into()));
    };
    let table = manifest.remove("tensors").ok_or_else(|| Error::Load("manifest has no tensor table".into()))?;
    let table: BTreeMap<String, ContainerEntry> =
        serde_json::from_value(table).map_err(|e| Error::Load(format!("malformed tensor table: {e}")))?;
    let blob = &bytes[blob_start..];

    let mut tensors = BTreeMap::new();
    for (name, entry) in table {
        let bad = |reason: String| Error::LoadTensor { tensor: name.clone(), reason };
        if entry.dtype != "f32" {
            return Err(bad(format!("unsupported dtype `{}`", entry.dtype)));
        }
        let count = entry.shape[0] * entry.shape[1];
        if entry.byte_len != count * 4 {
            return Err(bad(format!("byte_len {} does not match shape {:?}", entry.byte_len, entry.shape)));
        }
        if entry.offset % ALIGN != 0 {
            return Err(bad(format!("offset {} is not 64-byte aligned", entry.offset)));
        }
        let end = entry.offset + entry.byte_len;
        if end > blob.len() {
            return Err(bad(format!("truncated: needs bytes {}..{end} of a {}-byte blob", entry.offset, blob.len())));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor2D::new(entry.shape[0], entry.shape[1], data)?);
    }
    Ok((Value::Object(manifest), tensors))
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    let header = serde_json::to_value(ModelHeader {
        config: model.config().clone(),
        vocab: model.vocab().map(<[String]>::to_vec),
    })?;
    write_container(path, MODEL_MAGIC, header, &model.weights().named())
}

/// Loads and validates a model container.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let (header, mut tensors) = read_container(path, MODEL_MAGIC)?;
    let header: ModelHeader =
        serde_json::from_value(header).map_err(|e| Error::Load(format!("bad model config: {e}")))?;
    let config = header.config;
    config.validate().map_err(|e| Error::Load(e.to_string()))?;
    for (name, shape) in config.tensor_shapes() {
        match tensors.get(&name) {
            None => return Err(Error::LoadTensor { tensor: name, reason: "missing".into() }),
            Some(t) if t.shape() != shape => {
                return Err(Error::LoadTensor {
                    reason: format!("shape {:?}, expected {:?}", t.shape(), shape),
                    tensor: name,
                })
            }
            Some(_) => {}
        }
    }
    let weights = ModelWeights::from_named(&config, |name| {
        tensors.remove(name).ok_or_else(|| Error::LoadTensor { tensor: name.to_string(), reason: "missing".into() })
    })?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::LoadTensor { tensor: extra.clone(), reason: "not part of the model layout".into() });
    }
    Model::with_vocab(config, weights, header.vocab)
}
