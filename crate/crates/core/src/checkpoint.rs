//! Full and delta checkpoints.
//!
//! Layout of both kinds: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor's values as little-endian `f64`
//! in header order. Loading is bit-exact.
//!
//! A delta holds only the trainable PEFT parameters plus the [`PeftSpec`]
//! and the SHA-256 of the base parameters it was trained from. Applying it
//! rebuilds the adapted model from that base.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GroundingModel, ModelConfig};
use crate::peft::{inject, PeftSpec};
use crate::tensor::{ParamKind, ParamSet, Parameter};

const FULL_MAGIC: &[u8; 8] = b"VGPCKPT1";
const DELTA_MAGIC: &[u8; 8] = b"VGPDELT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Vec<usize>,
    kind: ParamKind,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    peft: Option<PeftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_sha256: Option<String>,
    entries: Vec<Entry>,
}

/// SHA-256 over `(path, shape, little-endian values)` of the selected
/// parameters, in storage order, as lowercase hex.
pub fn checksum<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.path.len() as u64).to_le_bytes());
        h.update(p.path.as_bytes());
        h.update((p.tensor.shape().len() as u64).to_le_bytes());
        for d in p.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn params_checksum(params: &ParamSet) -> String {
    checksum(params.iter())
}

/// Hash of every frozen parameter; constant across PEFT training.
pub fn frozen_checksum(params: &ParamSet) -> String {
    checksum(params.iter().filter(|p| !p.trainable))
}

fn write_file<'a>(
    path: &Path,
    magic: &[u8; 8],
    header: &Header,
    params: impl Iterator<Item = &'a Parameter>,
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in params {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_file(path: &Path, magic: &[u8; 8]) -> Result<(Header, Vec<Vec<f64>>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != magic {
        let other = if magic == FULL_MAGIC { DELTA_MAGIC } else { FULL_MAGIC };
        return Err(bad(if &bytes[..8] == other { "wrong checkpoint kind" } else { "bad magic" }));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut offset = 16 + hlen;
    let mut values = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let end = offset + n * 8;
        let raw = bytes.get(offset..end).ok_or_else(|| bad("truncated tensor data"))?;
        values.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, values))
}

fn entry(p: &Parameter) -> Entry {
    Entry { path: p.path.clone(), shape: p.tensor.shape().to_vec(), kind: p.kind, trainable: p.trainable }
}

/// Overwrites parameters by path, checking shapes and kinds.
fn assign(model: &mut GroundingModel, entries: &[Entry], values: Vec<Vec<f64>>, set_flags: bool) -> Result<()> {
    for (e, v) in entries.iter().zip(values) {
        let id = model
            .params
            .id_of(&e.path)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.path)))?;
        let p = model.params.get_mut(id);
        if p.tensor.shape() != e.shape.as_slice() || p.kind != e.kind {
            return Err(Error::Checkpoint(format!(
                "`{}`: stored shape {:?} does not match model shape {:?}",
                e.path,
                e.shape,
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(&v);
        if set_flags {
            p.trainable = e.trainable;
        }
    }
    Ok(())
}

/// Writes every parameter, the config and any PEFT structure.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &GroundingModel) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        peft: model.peft.clone(),
        base_sha256: None,
        entries: model.params.iter().map(entry).collect(),
    };
    write_file(path.as_ref(), FULL_MAGIC, &header, model.params.iter())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GroundingModel> {
    let (header, values) = read_file(path.as_ref(), FULL_MAGIC)?;
    let mut model = GroundingModel::build(&header.config)?;
    if let Some(spec) = &header.peft {
        inject(&mut model, spec)?;
    }
    let stored: BTreeSet<&str> = header.entries.iter().map(|e| e.path.as_str()).collect();
    let expected: BTreeSet<&str> = model.params.iter().map(|p| p.path.as_str()).collect();
    if stored != expected || stored.len() != header.entries.len() {
        return Err(Error::Checkpoint("parameter set does not match the rebuilt architecture".into()));
    }
    assign(&mut model, &header.entries, values, true)?;
    Ok(model)
}

/// Writes the trainable parameters of an adapted model, tied to the base
/// model it was injected into by `base_sha256` (see [`params_checksum`]).
pub fn save_delta(path: impl AsRef<Path>, adapted: &GroundingModel, base_sha256: &str) -> Result<()> {
    let spec = adapted
        .peft
        .clone()
        .ok_or_else(|| Error::State("delta checkpoints need a model with PEFT structure".into()))?;
    let header = Header {
        config: adapted.config.clone(),
        peft: Some(spec),
        base_sha256: Some(base_sha256.to_string()),
        entries: adapted.params.iter().filter(|p| p.trainable).map(entry).collect(),
    };
    write_file(path.as_ref(), DELTA_MAGIC, &header, adapted.params.iter().filter(|p| p.trainable))
}

/// Reads a delta's PEFT spec without touching any base.
pub fn delta_spec(path: impl AsRef<Path>) -> Result<PeftSpec> {
    let (header, _) = read_file(path.as_ref(), DELTA_MAGIC)?;
    header.peft.ok_or_else(|| Error::Checkpoint("delta without PEFT spec".into()))
}

/// Reconstructs the adapted model from its base and a delta.
pub fn apply_delta(base: &GroundingModel, path: impl AsRef<Path>) -> Result<GroundingModel> {
    let (header, values) = read_file(path.as_ref(), DELTA_MAGIC)?;
    if base.peft.is_some() {
        return Err(Error::State("delta must be applied to a plain base model".into()));
    }
    let expected = header.base_sha256.clone().unwrap_or_default();
    let actual = params_checksum(&base.params);
    if expected != actual || header.config != base.config {
        return Err(Error::Checksum { expected, actual });
    }
    let spec = header.peft.ok_or_else(|| Error::Checkpoint("delta without PEFT spec".into()))?;
    let mut model = base.clone();
    inject(&mut model, &spec)?;
    let stored: BTreeSet<&str> = header.entries.iter().map(|e| e.path.as_str()).collect();
    let trainable: BTreeSet<&str> = model.params.iter().filter(|p| p.trainable).map(|p| p.path.as_str()).collect();
    if stored != trainable {
        return Err(Error::Checkpoint("delta parameters do not match the PEFT structure".into()));
    }
    assign(&mut model, &header.entries, values, false)?;
    Ok(model)
}
