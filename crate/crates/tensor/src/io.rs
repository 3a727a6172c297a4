//! MDTN binary tensor files and parameter checkpoints.
//!
//! Layout: `b"MDTN"`, version `0x01`, dtype byte (1 = f32, 2 = f64), ndim
//! byte, `ndim` little-endian u64 extents, then the row-major little-endian
//! payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MDTN";
pub const VERSION: u8 = 0x01;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.ndim() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Reads the header only.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("missing MDTN magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", bytes[4])));
    }
    DType::from_code(bytes[5]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", bytes[5])))
}

/// Decodes a tensor, converting from the stored dtype when it differs from `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let dtype = peek_dtype(bytes)?;
    let ndim = bytes[6] as usize;
    let header = 7 + 8 * ndim;
    if bytes.len() < header {
        return Err(TensorError::Format("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[7 + 8 * i..15 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.size() {
        return Err(TensorError::Format(format!(
            "payload holds {} bytes, dims {dims:?} need {}",
            payload.len(),
            n * dtype.size()
        )));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(&dims, data)
}

pub fn write<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

/// Writes every parameter as `<name>.mdtn` plus `manifest.json`.
pub fn save_params<T: Element>(dir: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        write(dir.join(format!("{name}.mdtn")), t)?;
        manifest.push(ManifestEntry {
            name: name.to_string(),
            dims: t.dims().to_vec(),
        });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint into an already-built store; names and dims must match.
pub fn load_params<T: Element>(dir: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    for entry in manifest {
        let id = store.id(&entry.name)?;
        let t: Tensor<T> = read(dir.join(format!("{}.mdtn", entry.name)))?;
        t.expect_dims("checkpoint", &entry.dims)?;
        store.assign(id, t)?;
    }
    Ok(())
}
