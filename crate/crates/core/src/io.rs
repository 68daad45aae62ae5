//! Parameter persistence: a JSON manifest naming each tensor and its shape,
//! followed by the tensors' values as little-endian `f64` in manifest order.
//!
//! Two layouts share the manifest type. The split layout writes the manifest
//! and the blob to separate files (used for the backbone). The bundle layout
//! stores both in one file: the 8-byte magic `LRBUNDL1`, the manifest length
//! as a little-endian `u64`, the manifest JSON, then the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LRBUNDL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(kind: &str, meta: serde_json::Value, named: &[(String, &Tensor)]) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: named
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }
}

pub fn blob_bytes(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.numel() * 8).sum());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blob(manifest: &Manifest, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if expected != bytes.len() {
        return Err(contract(format!(
            "blob holds {} bytes but manifest describes {expected}",
            bytes.len()
        )));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let data = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        offset += n * 8;
        out.push(Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(out)
}

pub fn bundle_bytes(manifest: &Manifest, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob_bytes(tensors));
    Ok(out)
}

pub fn parse_bundle(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(contract("not a parameter bundle"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| contract("truncated bundle manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])?;
    let tensors = decode_blob(&manifest, &bytes[json_end..])?;
    Ok((manifest, tensors))
}

/// Writes through a sibling temp file and renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| contract(format!("no file name in {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(Error::from)
}

pub fn write_bundle(path: &Path, manifest: &Manifest, tensors: &[&Tensor]) -> Result<()> {
    write_atomic(path, &bundle_bytes(manifest, tensors)?)
}

pub fn read_bundle(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    parse_bundle(&fs::read(path)?)
}

pub fn write_split(blob: &Path, manifest_path: &Path, manifest: &Manifest, tensors: &[&Tensor]) -> Result<()> {
    write_atomic(manifest_path, &serde_json::to_vec_pretty(manifest)?)?;
    write_atomic(blob, &blob_bytes(tensors))
}

pub fn read_split(blob: &Path, manifest_path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let tensors = decode_blob(&manifest, &fs::read(blob)?)?;
    Ok((manifest, tensors))
}
