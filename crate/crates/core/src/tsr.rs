//! TSR1 tensor files.
//!
//! Layout (little-endian): `b"TSR1"`, `u8` dtype (0 = f32, 1 = f64), `u8` rank,
//! `rank × u64` extents, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TSR1";

/// A decoded TSR1 payload. Extents may be zero (e.g. an empty mask stack).
#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl RawTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            RawTensor::F32 { shape, .. } | RawTensor::F64 { shape, .. } => shape,
        }
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            RawTensor::F32 { .. } => 0,
            RawTensor::F64 { .. } => 1,
        }
    }

    /// Converts to `T`, casting between precisions when the stored dtype differs.
    pub fn into_values<T: Scalar>(self) -> (Vec<usize>, Vec<T>) {
        match self {
            RawTensor::F32 { shape, data } => {
                let v = data.into_iter().map(|x| T::from_f(x as f64)).collect();
                (shape, v)
            }
            RawTensor::F64 { shape, data } => {
                let v = data.into_iter().map(T::from_f).collect();
                (shape, v)
            }
        }
    }

    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        let (shape, data) = self.into_values::<T>();
        Tensor::new(&shape, data)
    }
}

pub fn encode_raw<T: Scalar>(shape: &[usize], data: &[T]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(6 + 8 * shape.len() + data.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE_CODE);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    encode_raw(t.shape(), t.data())
}

/// Decodes one TSR1 record; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 6 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = bytes[4];
    let elem = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(fail(4, format!("unknown dtype code {other}"))),
    };
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let Some(chunk) = bytes.get(pos..pos + 8) else {
            return Err(fail(bytes.len(), "truncated extents".into()));
        };
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| fail(pos, format!("extent {d} too large")))?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(6, "extent product overflows".into()))?;
    let need = numel
        .checked_mul(elem)
        .ok_or_else(|| fail(6, "payload size overflows".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(fail(pos + need, "trailing bytes after payload".into()));
    }
    Ok(match dtype {
        0 => RawTensor::F32 {
            shape,
            data: payload.chunks_exact(4).map(f32::read_le).collect(),
        },
        _ => RawTensor::F64 {
            shape,
            data: payload.chunks_exact(8).map(f64::read_le).collect(),
        },
    })
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_raw(path, t.shape(), t.data())
}

pub fn write_raw<T: Scalar>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    fs::write(path, encode_raw(shape, data)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read(path)?.into_tensor()
}
