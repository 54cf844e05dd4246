//! Directory archive: `manifest.json` plus one little-endian f32 row-major blob
//! per named tensor.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LocError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(LocError::Shape(format!(
                "tensor `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Configuration snapshot of the run that produced the archive.
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    /// Free-form provenance (stage history, layer order, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extras: serde_json::Value,
}

impl Manifest {
    pub fn new(config: serde_json::Value, step: u64, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tensors: Vec::new(),
            config,
            step,
            seed,
            extras: serde_json::Value::Null,
        }
    }
}

/// Writes `tensors` under `dir`. The `tensors` field of `manifest` is replaced.
pub fn save_checkpoint(tensors: &[NamedTensor], manifest: &Manifest, dir: &Path) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(LocError::DuplicateName(t.name.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| LocError::io(dir, e))?;
    let mut manifest = manifest.clone();
    manifest.format_version = FORMAT_VERSION;
    manifest.tensors = Vec::with_capacity(tensors.len());
    for t in tensors {
        let file = format!("{}.bin", t.name);
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| LocError::io(&path, e))?;
        manifest.tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            file,
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| LocError::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Vec<NamedTensor>, Manifest)> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(LocError::MissingFile(path));
    }
    let raw = fs::read(&path).map_err(|e| LocError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(LocError::UnknownVersion(manifest.format_version));
    }
    let mut seen = BTreeSet::new();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(LocError::DuplicateName(entry.name.clone()));
        }
        if entry.dtype != "f32" {
            return Err(LocError::Manifest(format!(
                "tensor `{}` has dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let file = dir.join(&entry.file);
        if !file.exists() {
            return Err(LocError::MissingBlob {
                name: entry.name.clone(),
                file,
            });
        }
        let bytes = fs::read(&file).map_err(|e| LocError::io(&file, e))?;
        let expected = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(LocError::ByteLengthMismatch {
                name: entry.name.clone(),
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    Ok((tensors, manifest))
}
