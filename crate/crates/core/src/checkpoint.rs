// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint files.
//!
//! Layout: the 8-byte magic `OTTRCKPT`, the manifest length as a
//! little-endian `u64`, a JSON manifest, then every tensor as contiguous
//! little-endian `f32` values in manifest order. The manifest records the
//! model and extension configurations and, per tensor, its name, shape,
//! byte offset, ownership regions (run-length encoded; structural zeros
//! included), whether it is frozen, and a SHA-256 of its bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OtterError, Result};
use crate::otter::{Extension, OtterConfig, OtterModel};
use crate::params::{GroupWidths, Param, STRUCTURAL_ZERO};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"OTTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionEntry {
    pub config: OtterConfig,
    pub group: usize,
    pub reward_head: bool,
    pub generation_heads: usize,
}

/// A run of `len` elements with the same owner tag (255 = structural zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerRun {
    pub owner: u8,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// `true` when no element is trainable in the saved state.
    pub frozen: bool,
    pub owners: Vec<OwnerRun>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub widths: GroupWidths,
    pub extensions: Vec<ExtensionEntry>,
    pub trainable_group: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn runs(owner: &[u8]) -> Vec<OwnerRun> {
    let mut out: Vec<OwnerRun> = Vec::new();
    for &o in owner {
        match out.last_mut() {
            Some(r) if r.owner == o => r.len += 1,
            _ => out.push(OwnerRun { owner: o, len: 1 }),
        }
    }
    out
}

fn tensor_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    t.data().iter().flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes()).collect()
}

/// Serializes `model` (values rounded to `f32`).
pub fn to_bytes<T: Scalar>(model: &OtterModel<T>) -> Vec<u8> {
    let trainable = model.trainable_group();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        let bytes = tensor_bytes(&p.tensor);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: payload.len() as u64,
            frozen: !trainable.is_some_and(|g| p.has_group(g)),
            owners: runs(&p.owner),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        model: model.model.config.clone(),
        widths: model.model.widths.clone(),
        extensions: model
            .extensions
            .iter()
            .map(|e| ExtensionEntry {
                config: e.config.clone(),
                group: e.group,
                reward_head: e.reward.is_some(),
                generation_heads: e.generation.as_ref().map_or(0, |g| g.len()),
            })
            .collect(),
        trainable_group: trainable,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Reads the manifest only.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    let header = |detail: &str| OtterError::Corrupt { tensor: "<header>".into(), detail: detail.into() };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(header("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| header("truncated manifest"))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..end]).map_err(|e| header(&e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| header("manifest has no version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(OtterError::Version { found: version as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| header(&e.to_string()))?;
    Ok((manifest, end))
}

fn fill<T: Scalar>(p: &mut Param<T>, entry: &TensorEntry, payload: &[u8]) -> Result<()> {
    let corrupt = |detail: String| OtterError::Corrupt { tensor: entry.name.clone(), detail };
    if entry.name != p.name || entry.shape != p.tensor.shape() {
        return Err(corrupt(format!("expected `{}` with shape {:?}", p.name, p.tensor.shape())));
    }
    if entry.owners != runs(&p.owner) {
        return Err(corrupt("ownership regions do not match the configuration".into()));
    }
    let n = p.numel() * 4;
    let start = entry.offset as usize;
    let bytes = payload
        .get(start..start.saturating_add(n))
        .ok_or_else(|| corrupt(format!("payload truncated: need bytes {start}..{}, have {}", start + n, payload.len())))?;
    if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    for (v, chunk) in p.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
        *v = T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
    }
    if let Some(&i) = p.zero_violations().first() {
        return Err(corrupt(format!("structural zero at flat index {i} is not zero")));
    }
    Ok(())
}

/// Parses a checkpoint, verifying checksums and structural zeros.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<OtterModel<T>> {
    let (manifest, start) = read_manifest(bytes)?;
    let payload = &bytes[start..];
    let model = Model::allocate(manifest.model.clone(), manifest.widths.clone())?;
    let mut extensions = Vec::with_capacity(manifest.extensions.len());
    for e in &manifest.extensions {
        let mut ext = Extension { config: e.config.clone(), group: e.group, reward: None, generation: None };
        if e.reward_head {
            ext.reward = Some(crate::heads::RewardHead::zeros(&e.config.name, e.config.d_ext, e.group as u8));
        }
        if e.generation_heads > 0 {
            ext.generation = Some(crate::heads::GenerationHeads::zeros(
                &e.config.name,
                e.generation_heads,
                manifest.model.d_inp,
                e.config.d_ext,
                e.group as u8,
            )?);
        }
        extensions.push(ext);
    }
    if extensions.iter().enumerate().any(|(i, e)| e.group != i + 1) || manifest.widths.groups() != extensions.len() + 1 {
        return Err(OtterError::Corrupt { tensor: "<header>".into(), detail: "extension groups are inconsistent".into() });
    }
    let mut otter = OtterModel::from_parts(model, extensions, manifest.trainable_group);
    {
        let mut params = otter.params_mut();
        if params.len() != manifest.tensors.len() {
            return Err(OtterError::Corrupt {
                tensor: "<header>".into(),
                detail: format!("{} tensors listed, {} expected", manifest.tensors.len(), params.len()),
            });
        }
        for (p, entry) in params.iter_mut().zip(&manifest.tensors) {
            fill(p, entry, payload)?;
        }
    }
    let expected_len: usize = otter.params().iter().map(|p| p.numel() * 4).sum();
    if payload.len() != expected_len {
        let last = manifest.tensors.last().map_or("<payload>".to_string(), |t| t.name.clone());
        return Err(OtterError::Corrupt { tensor: last, detail: format!("payload has {} bytes, expected {expected_len}", payload.len()) });
    }
    Ok(otter)
}

pub fn save_checkpoint<T: Scalar>(model: &OtterModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| OtterError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<OtterModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| OtterError::io(path, e))?;
    from_bytes(&bytes)
}

/// Number of structural-zero elements recorded in a manifest.
pub fn zero_count(manifest: &Manifest) -> usize {
    manifest.tensors.iter().flat_map(|t| &t.owners).filter(|r| r.owner == STRUCTURAL_ZERO).map(|r| r.len).sum()
}
