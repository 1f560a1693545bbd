//! Binary checkpoints: `MXST`, version, parameter count, then per parameter
//! `{name_len, name, rank, dims.., f32 data}`, all little-endian. A JSON
//! sidecar mirrors names, shapes and the model config.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MixSTE, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MXST";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<SidecarParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarParam {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[CheckpointEntry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(entries.len())?.to_le_bytes())?;
    for e in entries {
        w.write_all(&u32_of(e.name.len())?.to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&u32_of(e.shape.len())?.to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.data.len() * 4);
        e.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Parse(format!("parameter {i}: name is not UTF-8")))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

/// Sidecar path for a checkpoint: `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the checkpoint and its JSON sidecar.
pub fn save_checkpoint<T: Scalar>(model: &MixSTE<T>, path: &Path) -> Result<()> {
    let entries: Vec<CheckpointEntry> = model
        .store
        .iter()
        .map(|p| CheckpointEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            data: p.tensor.data().iter().map(|v| v.f64() as f32).collect(),
        })
        .collect();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &entries)?;
    fs::write(path, buf)?;
    let sidecar = Sidecar {
        format: "MXST".into(),
        version: VERSION,
        config: model.config.clone(),
        params: entries
            .iter()
            .map(|e| SidecarParam {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads a checkpoint, taking the config from its sidecar.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<MixSTE<T>> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let entries = read_checkpoint(&mut fs::File::open(path)?)?;
    let mut model = MixSTE::<T>::new(sidecar.config, 0)?;
    if entries.len() != model.store.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} parameters, config expects {}",
            entries.len(),
            model.store.len()
        )));
    }
    for (p, e) in model.store.iter_mut().zip(entries) {
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Schema(format!(
                "checkpoint parameter {} {:?} does not match expected {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor = Tensor::new(e.shape, e.data.iter().map(|&v| T::c(v as f64)).collect())?.with_requires_grad(true);
    }
    Ok(model)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Param(format!("{v} does not fit in 32 bits")))
}
