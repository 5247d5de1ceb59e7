//! TSNT: one named tensor per blob.
//!
//! ```text
//! "TSNT" | version: u32 LE | header length: u32 LE | JSON {name, shape, dtype} | data (LE)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tsn_core::{DType, Scalar, Tensor};

pub const TSNT_MAGIC: [u8; 4] = *b"TSNT";
pub const TSNT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("bad header: {0}")]
    Header(String),
    #[error("truncated data: {0}")]
    Truncated(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// A decoded tensor in whichever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

fn encode_data<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    out
}

/// Serializes `t` as a complete TSNT blob.
pub fn encode_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Vec<u8> {
    let header = TensorHeader {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.name().to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + t.len() * T::DTYPE.size_of());
    out.extend_from_slice(&TSNT_MAGIC);
    out.extend_from_slice(&TSNT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&encode_data(t));
    out
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode_tensor(name, t))
}

fn read_u32(r: &mut impl Read) -> Result<u32, DecodeError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one TSNT blob.
pub fn read_tensor(r: &mut impl Read) -> Result<(String, AnyTensor), DecodeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TSNT_MAGIC {
        return Err(DecodeError::Magic(magic));
    }
    let version = read_u32(r)?;
    if version != TSNT_VERSION {
        return Err(DecodeError::Version(version));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: TensorHeader = serde_json::from_slice(&json).map_err(|e| DecodeError::Header(e.to_string()))?;
    let dtype = DType::from_name(&header.dtype).ok_or_else(|| DecodeError::Header(format!("unknown dtype {}", header.dtype)))?;
    let n = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 32))
        .ok_or_else(|| DecodeError::Header(format!("bad shape {:?}", header.shape)))?;
    let mut raw = vec![0u8; n * dtype.size_of()];
    r.read_exact(&mut raw)?;
    let bad_shape = |e: tsn_core::Error| DecodeError::Header(e.to_string());
    let tensor = match dtype {
        DType::F32 => {
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            AnyTensor::F32(Tensor::new(&header.shape, data).map_err(bad_shape)?)
        }
        DType::F64 => {
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            AnyTensor::F64(Tensor::new(&header.shape, data).map_err(bad_shape)?)
        }
    };
    Ok((header.name, tensor))
}
