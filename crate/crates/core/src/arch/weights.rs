//! Binary weight files.
//!
//! Layout (little-endian): magic `CDNW`, `u32` version, `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u8` dtype tag
//! (0 = f32), a `u32` rank, `u32` dims and the raw element data. Tensors are
//! written in model parameter order.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ArchError, ArchSpec, Model};
use crate::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CDNW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a weights file (bad magic)")]
    Magic,
    #[error("unsupported weights version {0} (expected {VERSION})")]
    Version(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor `{name}`: unsupported dtype tag {tag}")]
    Dtype { name: String, tag: u8 },
    #[error("tensor `{name}`: rank {rank} not supported (expected 4)")]
    Rank { name: String, rank: u32 },
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("{0} trailing byte(s) after the last tensor")]
    Trailing(usize),
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("unexpected tensor(s) not in the spec: {}", .0.join(", "))]
    Extra(Vec<String>),
    #[error("parameter `{name}`: shape {actual} does not match spec {expected}")]
    Shape { name: String, expected: Shape, actual: Shape },
    #[error(transparent)]
    Arch(#[from] ArchError),
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&4u32.to_le_bytes());
        for d in p.tensor.shape().dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(WeightsError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Named tensors of a weights file, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, WeightsError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| WeightsError::Magic)? != MAGIC {
        return Err(WeightsError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| WeightsError::Name)?.to_owned();
        let tag = r.take(1)?[0];
        if tag != DTYPE_F32 {
            return Err(WeightsError::Dtype { name, tag });
        }
        let rank = r.u32()?;
        if rank != 4 {
            return Err(WeightsError::Rank { name, rank });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape::from(dims);
        let raw = r.take(shape.numel().checked_mul(4).ok_or(WeightsError::Truncated(bytes.len()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::from_vec(shape, data).expect("length matches shape")));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

/// Rebuilds a model from decoded tensors; every spec parameter must be
/// present with its exact shape and nothing else may be.
pub fn model_from_tensors(spec: &ArchSpec, tensors: Vec<(String, Tensor<f32>)>) -> Result<Model<f32>, WeightsError> {
    let mut by_name = HashMap::with_capacity(tensors.len());
    for (name, t) in tensors {
        if by_name.contains_key(&name) {
            return Err(WeightsError::Duplicate(name));
        }
        by_name.insert(name, t);
    }
    let mut failure = None;
    let model = Model::from_params(spec, |name, expected| {
        let found = match by_name.remove(name) {
            None => Err(WeightsError::Missing(name.to_owned())),
            Some(t) if t.shape() != expected => Err(WeightsError::Shape {
                name: name.to_owned(),
                expected,
                actual: t.shape(),
            }),
            Some(t) => Ok(t),
        };
        found.map_err(|e| {
            failure = Some(e);
            ArchError::Schema(String::new())
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let model = model?;
    if !by_name.is_empty() {
        let mut extra: Vec<String> = by_name.into_keys().collect();
        extra.sort();
        return Err(WeightsError::Extra(extra));
    }
    Ok(model)
}

pub fn save_weights(model: &Model<f32>, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_weights(spec: &ArchSpec, path: impl AsRef<Path>) -> Result<Model<f32>, WeightsError> {
    let bytes = fs::read(path)?;
    model_from_tensors(spec, decode(&bytes)?)
}
