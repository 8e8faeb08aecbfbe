//! Tensor exchange files used by file-backed model backends.
//!
//! Layout: the 8-byte magic `TNSR0001`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{"dtype":"f32","order":"row-major","shape":[..]}`,
//! then `product(shape)` little-endian IEEE-754 `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"TNSR0001";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic")]
    BadMagic,
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("payload holds {actual} bytes, header implies {expected}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::HeaderMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Result<Self, TensorError> {
        Self::new(shape, data.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    order: String,
    shape: Vec<usize>,
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        order: "row-major".into(),
        shape: t.shape.clone(),
    })
    .expect("header serialises");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * t.data.len());
    out.extend(MAGIC);
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    for v in &t.data {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(TensorError::HeaderMismatch("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| TensorError::HeaderMismatch("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| TensorError::HeaderMismatch(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(TensorError::HeaderMismatch(format!("dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(TensorError::HeaderMismatch(format!("order {:?}", header.order)));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::HeaderMismatch("shape overflows".into()))?;
    let expected = count * 4;
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(TensorError::TruncatedData {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(TensorError::HeaderMismatch(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor {
        shape: header.shape,
        data,
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), TensorError> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    decode_tensor(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&t);
        let header = br#"{"dtype":"f32","order":"row-major","shape":[2,2]}"#;
        assert_eq!(&bytes[12..12 + header.len()], header);
        assert_eq!(bytes.len() - 12 - header.len(), 16);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_tensor(&Tensor::new(vec![1], vec![0.5]).unwrap());
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(TensorError::BadMagic)));
    }

    #[test]
    fn short_payload() {
        let bytes = encode_tensor(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(TensorError::TruncatedData { expected: 12, actual: 11 })
        ));
    }

    #[test]
    fn wrong_dtype() {
        let header = br#"{"dtype":"f64","order":"row-major","shape":[1]}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend((header.len() as u32).to_le_bytes());
        bytes.extend(header);
        bytes.extend([0u8; 8]);
        assert!(matches!(decode_tensor(&bytes), Err(TensorError::HeaderMismatch(_))));
    }
}
