//! `LGT1` binary tensors.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 4                | magic `LGT1`                              |
//! | 1                | endianness flag, always `1` (little)      |
//! | 1                | dtype: `0` f32, `1` i32, `2` u8           |
//! | 1                | rank `r`, at most 5                       |
//! | 1                | reserved, `0`                             |
//! | 8·r              | dims as u64                               |
//! | per axis         | u16 label length + UTF-8 label            |
//! | product(dims)·sz | row-major payload                         |

use std::path::Path;

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"LGT1";
pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    /// One name per axis (may be empty strings).
    pub labels: Vec<String>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, labels: Vec<String>, data: TensorData) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::Shape(format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!("{} labels for rank {}", labels.len(), dims.len())));
        }
        if labels.iter().any(|l| l.len() > u16::MAX as usize) {
            return Err(Error::Invalid("axis label too long".into()));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {count} values, got {}", data.len())));
        }
        Ok(Tensor { dims, labels, data })
    }

    pub fn f32(dims: &[usize], labels: &[&str], data: Vec<f32>) -> Result<Self> {
        Self::new(dims.to_vec(), labels.iter().map(|s| s.to_string()).collect(), TensorData::F32(data))
    }

    pub fn i32(dims: &[usize], labels: &[&str], data: Vec<i32>) -> Result<Self> {
        Self::new(dims.to_vec(), labels.iter().map(|s| s.to_string()).collect(), TensorData::I32(data))
    }

    pub fn u8(dims: &[usize], labels: &[&str], data: Vec<u8>) -> Result<Self> {
        Self::new(dims.to_vec(), labels.iter().map(|s| s.to_string()).collect(), TensorData::U8(data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.dims.len() * 10 + self.data.len() * 4);
        out.extend_from_slice(&TENSOR_MAGIC);
        out.push(1);
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(l.len() as u16).to_le_bytes());
            out.extend_from_slice(l.as_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses a tensor; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != TENSOR_MAGIC {
            return Err(Error::format(path, "missing LGT1 magic"));
        }
        if r.u8()? != 1 {
            return Err(Error::format(path, "only little-endian tensors are supported"));
        }
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(path, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        if r.u8()? != 0 {
            return Err(Error::format(path, "reserved header byte must be zero"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "dimension overflows usize"))?;
            dims.push(d);
        }
        let mut labels = Vec::with_capacity(rank);
        for _ in 0..rank {
            let n = r.u16()? as usize;
            let s = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(path, "axis label is not UTF-8"))?;
            labels.push(s.to_string());
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, "element count overflows"))?;
        let data = match dtype {
            0 => TensorData::F32(r.f32s(count)?),
            1 => TensorData::I32(
                r.take(count.checked_mul(4).ok_or_else(|| Error::format(path, "payload size overflows"))?)?
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::U8(r.take(count)?.to_vec()),
            other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
        };
        r.finish()?;
        Tensor::new(dims, labels, data).map_err(|e| Error::format(path, e.to_string()))
    }

    fn expect(&self, path: &Path, dtype: &str, rank: usize) -> Result<()> {
        if self.data.dtype_name() != dtype || self.dims.len() != rank {
            return Err(Error::format(
                path,
                format!(
                    "expected rank-{rank} {dtype} tensor, found rank-{} {}",
                    self.dims.len(),
                    self.data.dtype_name()
                ),
            ));
        }
        Ok(())
    }

    /// `(dims, values)` of an f32 tensor of the given rank.
    pub fn into_f32(self, path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<f32>)> {
        self.expect(path, "f32", rank)?;
        match self.data {
            TensorData::F32(v) => Ok((self.dims, v)),
            _ => unreachable!(),
        }
    }

    pub fn into_i32(self, path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<i32>)> {
        self.expect(path, "i32", rank)?;
        match self.data {
            TensorData::I32(v) => Ok((self.dims, v)),
            _ => unreachable!(),
        }
    }

    pub fn into_u8(self, path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
        self.expect(path, "u8", rank)?;
        match self.data {
            TensorData::U8(v) => Ok((self.dims, v)),
            _ => unreachable!(),
        }
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_file(path, &tensor.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&read_file(path)?, path)
}
