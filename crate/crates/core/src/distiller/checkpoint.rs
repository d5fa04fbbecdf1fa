//! Checkpoints: a `checkpoint.json` manifest plus one flat little-endian blob.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;

pub const MANIFEST: &str = "checkpoint.json";
pub const BLOB: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub step: u64,
    /// Run bookkeeping beyond the parameters (epoch, optimizer step, best loss…).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Everything a checkpoint directory holds, loaded into memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Params,
    pub config: serde_json::Value,
    pub step: u64,
    pub meta: serde_json::Value,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Writes `dir/checkpoint.json` and `dir/checkpoint.bin`, replacing any
/// previous contents atomically per file.
pub fn save_checkpoint(dir: impl AsRef<Path>, ck: &Checkpoint) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(ck.tensors.len());
    for (name, t) in ck.tensors.iter() {
        let dtype = dtype_name(t.dtype())?;
        let offset = blob.len() as u64;
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype.into(),
            file: BLOB.into(),
            offset,
        });
    }
    let manifest = Manifest {
        params: entries,
        config: ck.config.clone(),
        step: ck.step,
        meta: ck.meta.clone(),
    };
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(dir.to_path_buf())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Sidecar { path, source })
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut tensors = Params::new();
    let mut blobs: std::collections::BTreeMap<String, Vec<u8>> = Default::default();
    for e in &manifest.params {
        if !blobs.contains_key(&e.file) {
            let path = dir.join(&e.file);
            blobs.insert(e.file.clone(), fs::read(&path).map_err(|err| Error::io(&path, err))?);
        }
        let blob = &blobs[&e.file];
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("{}: unknown dtype {other}", e.name))),
        };
        let start = e.offset as usize;
        let end = start + n * width;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: blob too short", e.name)))?;
        let t = if width == 4 {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        } else {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        };
        tensors.insert(e.name.clone(), t);
    }
    Ok(Checkpoint {
        tensors,
        config: manifest.config,
        step: manifest.step,
        meta: manifest.meta,
    })
}

/// Entries under `prefix/`, with the prefix stripped.
pub fn section(p: &Params, prefix: &str) -> Params {
    let lead = format!("{prefix}/");
    let mut out = Params::new();
    for (name, t) in p.iter() {
        if let Some(rest) = name.strip_prefix(&lead) {
            out.insert(rest, t.clone());
        }
    }
    out
}

/// Inserts every entry of `src` under `prefix/`.
pub fn add_section(dst: &mut Params, prefix: &str, src: &Params) {
    for (name, t) in src.iter() {
        dst.insert(format!("{prefix}/{name}"), t.clone());
    }
}
