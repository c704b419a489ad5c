//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `CVRCKPT\0`, a little-endian `u32` format version, a
//! little-endian `u32` header length, the JSON header, then every tensor in
//! declaration order as 32-bit little-endian reals. A text sidecar
//! `<file>.tensors` lists `name<TAB>shape<TAB>sha256` per tensor.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NnError, Real};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CVRCKPT\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Serialized model spec.
    pub spec: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tensors");
    PathBuf::from(s)
}

fn tensor_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_checkpoint<T: Real>(
    path: &Path,
    header: &CheckpointHeader,
    tensors: &[&[T]],
) -> Result<(), NnError> {
    if tensors.len() != header.tensors.len() {
        return Err(NnError::Checkpoint(format!(
            "header lists {} tensors, {} supplied",
            header.tensors.len(),
            tensors.len()
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let mut sidecar = String::new();
    for (meta, values) in header.tensors.iter().zip(tensors) {
        if meta.len() != values.len() {
            return Err(NnError::Checkpoint(format!(
                "tensor {} has {} values, shape {:?}",
                meta.name,
                values.len(),
                meta.shape
            )));
        }
        let as_f32: Vec<f32> = values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        let bytes = tensor_bytes(&as_f32);
        let dims: Vec<String> = meta.shape.iter().map(ToString::to_string).collect();
        sidecar.push_str(&format!("{}\t{}\t{}\n", meta.name, dims.join("x"), checksum(&bytes)));
        out.extend_from_slice(&bytes);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

/// Reads a checkpoint and, when the sidecar exists, verifies every checksum.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| NnError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;

    let mut offset = 16 + hlen;
    let mut data = Vec::with_capacity(header.tensors.len());
    let mut sums = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n = meta.len() * 4;
        let chunk = bytes
            .get(offset..offset + n)
            .ok_or_else(|| bad(&format!("truncated tensor {}", meta.name)))?;
        sums.push(checksum(chunk));
        data.push(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
        offset += n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }

    if let Ok(sidecar) = std::fs::read_to_string(sidecar_path(path)) {
        let lines: Vec<&str> = sidecar.lines().collect();
        if lines.len() != header.tensors.len() {
            return Err(bad("sidecar tensor count differs"));
        }
        for ((line, meta), sum) in lines.iter().zip(&header.tensors).zip(&sums) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields[0] != meta.name || fields[2] != sum {
                return Err(bad(&format!("checksum mismatch for {}", meta.name)));
            }
        }
    }
    Ok(Checkpoint { header, data })
}
