//! Parameter checkpoints: one binary tensor file per weight and bias plus a
//! JSON manifest with names, shapes and SHA-256 content hashes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kernel_size: usize,
    pub weight: TensorEntry,
    pub bias: Option<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerEntry>,
    /// Hash over every tensor hash in layer order.
    pub content_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensor(dir: &Path, file: String, t: &Tensor) -> Result<TensorEntry> {
    let bytes = t.to_bytes()?;
    fs::write(dir.join(&file), &bytes)?;
    Ok(TensorEntry { file, shape: t.shape.clone(), sha256: sha256_hex(&bytes) })
}

fn read_tensor(dir: &Path, e: &TensorEntry) -> Result<Tensor> {
    let bytes = fs::read(dir.join(&e.file))?;
    if sha256_hex(&bytes) != e.sha256 {
        return Err(Error::Format(format!("hash mismatch for {}", e.file)));
    }
    let t = Tensor::read_from(bytes.as_slice())?;
    if t.shape != e.shape {
        return Err(Error::Format(format!("{}: shape {:?} does not match manifest {:?}", e.file, t.shape, e.shape)));
    }
    Ok(t)
}

fn combined_hash(layers: &[LayerEntry]) -> String {
    let mut h = Sha256::new();
    for l in layers {
        h.update(l.name.as_bytes());
        h.update(l.weight.sha256.as_bytes());
        if let Some(b) = &l.bias {
            h.update(b.sha256.as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `layers` into `dir`, creating it if needed.
pub fn save(dir: impl AsRef<Path>, layers: &[(String, &ConvParams)]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(layers.len());
    for (name, p) in layers {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::InvalidInput(format!("bad layer name `{name}`")));
        }
        let weight = write_tensor(dir, format!("{name}.weight.bin"), &p.weight_tensor())?;
        let bias = match p.bias_tensor() {
            Some(b) => Some(write_tensor(dir, format!("{name}.bias.bin"), &b)?),
            None => None,
        };
        entries.push(LayerEntry { name: name.clone(), kernel_size: p.kernel_size, weight, bias });
    }
    let manifest = Manifest { content_hash: combined_hash(&entries), layers: entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads every layer back, verifying hashes and shapes.
pub fn load(dir: impl AsRef<Path>) -> Result<Vec<(String, ConvParams)>> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if combined_hash(&manifest.layers) != manifest.content_hash {
        return Err(Error::Format("manifest content hash mismatch".into()));
    }
    let mut out = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        let w = read_tensor(dir, &l.weight)?;
        if w.shape.len() != 4 || w.shape[2] != l.kernel_size || w.shape[3] != l.kernel_size {
            return Err(Error::Format(format!("layer {} has weight shape {:?}", l.name, w.shape)));
        }
        let bias = match &l.bias {
            Some(e) => Some(read_tensor(dir, e)?.data),
            None => None,
        };
        let p = ConvParams::new(l.kernel_size, w.shape[1], w.shape[0], w.data, bias)
            .map_err(|e| Error::Format(format!("layer {}: {e}", l.name)))?;
        out.push((l.name.clone(), p));
    }
    Ok(out)
}
