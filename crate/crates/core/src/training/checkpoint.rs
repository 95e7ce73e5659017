//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"BFMC"`, `u32` version, `u64` metadata length,
//! metadata JSON, then tensors until end of file. Each tensor is
//! `u32` name length, name bytes, `u8` dtype tag (0 = f32, 1 = f64),
//! `u32` rank, `rank x u64` dims, raw data.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Task};
use crate::corpus::write_atomic;
use crate::error::{Error, Result};
use crate::network::{ModelParams, NetConfig};
use crate::tensor::Tensor;
use crate::training::optim::OptimState;

pub const MAGIC: &[u8; 4] = b"BFMC";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    pub optim_t: u64,
    /// Set once the weights have been finetuned for a task.
    pub task: Option<Task>,
    pub net: NetConfig,
    pub run_config: RunConfig,
    /// Random streams are counter-derived from the seed and step, so the seed
    /// and step fully determine every stream position.
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub optim: Option<OptimState>,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
    out.extend_from_slice(name.as_bytes());
    out.write_u8(DTYPE_F64).unwrap();
    out.write_u32::<LittleEndian>(t.shape.len() as u32).unwrap();
    for d in &t.shape {
        out.write_u64::<LittleEndian>(*d as u64).unwrap();
    }
    for x in &t.data {
        out.write_f64::<LittleEndian>(*x).unwrap();
    }
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&c.meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u64::<LittleEndian>(meta.len() as u64).unwrap();
    out.extend_from_slice(&meta);
    for (k, t) in &c.params.tensors {
        write_tensor(&mut out, &format!("{PARAM}{k}"), t);
    }
    if let Some(o) = &c.optim {
        for (k, t) in &o.m {
            write_tensor(&mut out, &format!("{MOMENT1}{k}"), t);
        }
        for (k, t) in &o.v {
            write_tensor(&mut out, &format!("{MOMENT2}{k}"), t);
        }
    }
    out
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Format(format!("truncated checkpoint while reading {what}: {e}"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated("version"))?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let meta_len = r.read_u64::<LittleEndian>().map_err(truncated("metadata length"))? as usize;
    if meta_len > bytes.len() {
        return Err(Error::Format("metadata length exceeds file size".into()));
    }
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(truncated("metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    while (r.position() as usize) < bytes.len() {
        let name_len = r.read_u32::<LittleEndian>().map_err(truncated("tensor name length"))? as usize;
        if name_len > bytes.len() {
            return Err(Error::Format("tensor name length exceeds file size".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated("tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.read_u8().map_err(truncated("dtype"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated("rank"))? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(truncated("dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => return Err(Error::Format(format!("tensor '{name}' has unknown dtype tag {other}"))),
        };
        let remaining = bytes.len() - r.position() as usize;
        if n.checked_mul(width).map_or(true, |b| b > remaining) {
            return Err(Error::Format(format!("truncated checkpoint in tensor '{name}'")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(match dtype {
                DTYPE_F32 => r.read_f32::<LittleEndian>().map_err(truncated("data"))? as f64,
                _ => r.read_f64::<LittleEndian>().map_err(truncated("data"))?,
            });
        }
        let t = Tensor { shape, data };
        if let Some(k) = name.strip_prefix(PARAM) {
            params.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(MOMENT1) {
            m.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(MOMENT2) {
            v.insert(k.to_string(), t);
        } else {
            return Err(Error::Format(format!("unexpected tensor '{name}'")));
        }
    }
    let optim = if m.is_empty() && v.is_empty() {
        None
    } else {
        Some(OptimState { t: meta.optim_t, m, v })
    };
    Ok(Checkpoint {
        meta,
        params: ModelParams { tensors: params },
        optim,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode(c))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Bitwise file writer helper used for logs that must be reproducible.
pub(crate) fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
