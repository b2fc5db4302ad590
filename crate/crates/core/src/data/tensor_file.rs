//! `.tsr` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes       | content                                        |
//! |-------------|------------------------------------------------|
//! | 4           | magic `TSR1`                                   |
//! | 1           | dtype code: 1 = f32, 2 = f64, 3 = u8, 4 = i32  |
//! | 1           | rank `r`, at most 4                            |
//! | 8 * r       | dimensions as u64                              |
//! | n * size    | row-major payload                              |

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSR1";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
    I32 = 4,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => DType::F32,
            2 => DType::F64,
            3 => DType::U8,
            4 => DType::I32,
            other => return Err(Error::TensorFile(format!("corrupt header: dtype code {other}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// A dense tensor of one of the supported element types.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
    I32(ArrayD<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
            TensorData::I32(a) => a.shape(),
        }
    }

    pub fn into_f32(self) -> Result<ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Ok(a),
            other => Err(Error::TensorFile(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let shape = self.shape();
        if shape.len() > MAX_RANK {
            return Err(Error::TensorFile(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(6 + 8 * shape.len() + n * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype() as u8);
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        // `iter()` walks in logical row-major order regardless of memory layout.
        match self {
            TensorData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::U8(a) => out.extend(a.iter().copied()),
            TensorData::I32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::TensorFile("corrupt header: bad magic".into()));
        }
        let dtype = DType::from_code(cur.take(1)?[0])?;
        let rank = cur.take(1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(Error::TensorFile(format!("corrupt header: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            dims.push(usize::try_from(d).map_err(|_| overflow())?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(overflow)?;
        let payload_len = n.checked_mul(dtype.size()).ok_or_else(overflow)?;
        let payload = cur.take(payload_len)?;
        if cur.pos != bytes.len() {
            return Err(Error::TensorFile(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.pos
            )));
        }
        let shape = IxDyn(&dims);
        let wrap = |e: ndarray::ShapeError| Error::TensorFile(e.to_string());
        Ok(match dtype {
            DType::F32 => TensorData::F32(
                ArrayD::from_shape_vec(shape, le_chunks(payload, f32::from_le_bytes)).map_err(wrap)?,
            ),
            DType::F64 => TensorData::F64(
                ArrayD::from_shape_vec(shape, le_chunks(payload, f64::from_le_bytes)).map_err(wrap)?,
            ),
            DType::U8 => TensorData::U8(ArrayD::from_shape_vec(shape, payload.to_vec()).map_err(wrap)?),
            DType::I32 => TensorData::I32(
                ArrayD::from_shape_vec(shape, le_chunks(payload, i32::from_le_bytes)).map_err(wrap)?,
            ),
        })
    }
}

impl From<ArrayD<f32>> for TensorData {
    fn from(a: ArrayD<f32>) -> Self {
        TensorData::F32(a)
    }
}

impl From<ArrayD<f64>> for TensorData {
    fn from(a: ArrayD<f64>) -> Self {
        TensorData::F64(a)
    }
}

impl From<ArrayD<u8>> for TensorData {
    fn from(a: ArrayD<u8>) -> Self {
        TensorData::U8(a)
    }
}

impl From<ArrayD<i32>> for TensorData {
    fn from(a: ArrayD<i32>) -> Self {
        TensorData::I32(a)
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &TensorData) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, tensor.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorData::decode(&bytes)
}

fn overflow() -> Error {
    Error::TensorFile("dimension overflow".into())
}

fn le_chunks<T, const N: usize>(payload: &[u8], f: fn([u8; N]) -> T) -> Vec<T> {
    payload
        .chunks_exact(N)
        .map(|c| f(c.try_into().expect("exact chunk")))
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| Error::TensorFile("unexpected end of tensor file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
