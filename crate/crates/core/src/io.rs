//! Golden-tensor files and parameter checkpoints.
//!
//! Tensor file layout: magic `METT`, version `u8`, dtype `u8` (0 = f32,
//! 1 = f64), rank `u8`, each dim as little-endian `u32`, then the values as
//! little-endian floats in row-major order.
//!
//! A checkpoint is a directory with one tensor file per parameter and a
//! `manifest.json` mapping names to files, shapes and roles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Component, ParamStore, Role, Tensor};

pub const MAGIC: &[u8; 4] = b"METT";
pub const VERSION: u8 = 1;
pub const MANIFEST: &str = "manifest.json";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor file, converting to `T` if the stored dtype differs.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing METT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_u8(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated dims".into()));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() != expected {
        return Err(Error::Format(format!("expected {expected} value bytes, found {}", body.len())));
    }
    let data = match dtype {
        DType::F32 => body.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => body.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(&dims, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub component: Component,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

fn file_name(index: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect();
    format!("{index:04}_{clean}.mett")
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, store: &ParamStore<T>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    for (i, (_, p)) in store.iter().enumerate() {
        let file = file_name(i, &p.name);
        write_tensor(&dir.join(&file), &p.value)?;
        tensors.push(ManifestEntry { name: p.name.clone(), file, shape: p.value.dims().to_vec(), role: p.role, component: p.component });
    }
    let manifest = Manifest { format: "METT".into(), tensors };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads every tensor of a checkpoint into a fresh store.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ParamStore<T>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let t: Tensor<T> = read_tensor(&dir.join(&e.file))?;
        if t.dims() != e.shape.as_slice() {
            return Err(Error::Format(format!("{}: manifest shape {:?}, file shape {:?}", e.name, e.shape, t.dims())));
        }
        store.add(e.name, e.role, e.component, t)?;
    }
    Ok(store)
}

/// Overwrites the values of `store` from a checkpoint with identical names
/// and shapes.
pub fn restore_into<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let loaded: ParamStore<T> = load_checkpoint(dir)?;
    if loaded.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model {}", loaded.len(), store.len())));
    }
    for p in store.iter_mut() {
        let src = loaded.by_name(&p.name).ok_or_else(|| Error::Format(format!("checkpoint lacks {}", p.name)))?;
        if src.value.dims() != p.value.dims() {
            return Err(Error::Format(format!("{}: shape {:?} vs {:?}", p.name, src.value.dims(), p.value.dims())));
        }
        p.value = src.value.clone();
    }
    Ok(())
}
