//! Model checkpoints.
//!
//! Layout: magic `GRCK`, `u32` format version, `u32` manifest length, the
//! manifest as canonical JSON, then every tensor as an encoded tensor file.
//! Tensor offsets in the manifest are relative to the first byte after the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use geo_repnet_core::{GeoRepNet, GeoRepNetConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{json, tensorfile};

pub const MAGIC: [u8; 4] = *b"GRCK";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Model configuration as canonical JSON text.
    pub config: String,
    pub fused: bool,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &GeoRepNet) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.state() {
        let blob = tensorfile::encode(&t);
        tensors.push(TensorEntry {
            name,
            offset: payload.len() as u64,
            length: blob.len() as u64,
        });
        payload.extend_from_slice(&blob);
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: json::to_canonical(&model.config)?,
        fused: model.is_fused(),
        tensors,
    };
    let text = json::to_canonical(&manifest)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + text.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, usize)> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::format(0, format!("{} bytes is too short for a checkpoint header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:02x?}, expected \"GRCK\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let end = PREFIX_LEN + len;
    let text = bytes
        .get(PREFIX_LEN..end)
        .ok_or_else(|| Error::format(8, format!("manifest length {len} runs past the end of the file")))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::format(PREFIX_LEN as u64 + e.valid_up_to() as u64, "manifest is not UTF-8"))?;
    let manifest: CheckpointManifest = serde_json::from_str(text)
        .map_err(|e| Error::format(PREFIX_LEN as u64, format!("manifest is not valid: {e}")))?;
    Ok((manifest, end))
}

pub fn decode(bytes: &[u8]) -> Result<GeoRepNet> {
    let (manifest, payload_start) = read_manifest(bytes)?;
    let config: GeoRepNetConfig = json::from_str(&manifest.config, "checkpoint config")?;
    let mut model = GeoRepNet::new(config, 0)?;
    if manifest.fused {
        model = model.reparameterize()?;
    }
    let mut state = BTreeMap::<String, Tensor>::new();
    for entry in &manifest.tensors {
        let start = payload_start as u64 + entry.offset;
        let end = start + entry.length;
        let blob = usize::try_from(start)
            .ok()
            .zip(usize::try_from(end).ok())
            .and_then(|(s, e)| bytes.get(s..e))
            .ok_or_else(|| Error::format(start.min(bytes.len() as u64), format!("tensor {} runs past the end of the file", entry.name)))?;
        let t = tensorfile::decode_at(blob, start)?;
        if state.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Data(format!("tensor {} appears twice", entry.name)));
        }
    }
    model.load_state(&state)?;
    Ok(model)
}

pub fn save(model: &GeoRepNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<GeoRepNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
