//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SPATCKPT"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndims    u32, dims (ndims × u64)
//!   values   product(dims) × f64
//! ```
//!
//! Tensors appear in [`ModelParams::tensors`] order. The model config is not
//! stored; [`load`] takes it from the caller and checks every name and shape.

use std::fs;
use std::path::Path;

use crate::model::{ModelConfig, ModelParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPATCKPT";
pub const VERSION: u32 = 1;

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut buf = Vec::with_capacity(16 + params.param_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::new();
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= bytes.len() / 8)
            .ok_or_else(|| Error::Data(format!("tensor {name} has an impossible shape {shape:?}")))?;
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(StoredTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

/// Rebuilds parameters for `config` from a checkpoint file.
pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, config)
}

pub fn from_bytes(bytes: &[u8], config: ModelConfig) -> Result<ModelParams> {
    let stored = decode(bytes)?;
    let mut params = ModelParams::init(config)?;
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if expected.len() != stored.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, model expects {}",
            stored.len(),
            expected.len()
        )));
    }
    for ((name, shape), (slot, t)) in expected.iter().zip(params.tensors_mut().into_iter().zip(&stored)) {
        if *name != t.name || *shape != t.shape {
            return Err(Error::Data(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                t.name, t.shape
            )));
        }
        slot.copy_from_slice(&t.data);
    }
    Ok(params)
}
