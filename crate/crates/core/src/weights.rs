//! Versioned binary weight files.
//!
//! Layout: the magic `LAMW`, a little-endian `u32` format version, a `u32`
//! header length, a JSON header, then every tensor as little-endian values
//! in header order. The header carries the model kind, a fingerprint of the
//! configuration that produced the weights, and free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LAMW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Hex SHA-256 of the JSON form of a value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write(path: &Path, header: &Header, tensors: &[TensorData]) -> Result<()> {
    let err = |msg: String| Error::Weights {
        path: path.to_path_buf(),
        msg,
    };
    if header.tensors.len() != tensors.len() {
        return Err(err("header and tensor count differ".into()));
    }
    let head = serde_json::to_vec(header).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::with_capacity(head.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    for (info, data) in header.tensors.iter().zip(tensors) {
        let n: usize = info.shape.iter().product();
        match (info.dtype, data) {
            (DType::F32, TensorData::F32(v)) if v.len() == n => {
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
            }
            (DType::F64, TensorData::F64(v)) if v.len() == n => {
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
            }
            _ => return Err(err(format!("tensor does not match {info:?}"))),
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Header, Vec<TensorData>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |msg: &str| Error::Weights {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(err("not a weights file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(err(&format!("unsupported format version {version}")));
    }
    let head_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + head_len;
    let head = bytes.get(12..body_start).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(head).map_err(|e| err(&e.to_string()))?;
    let mut pos = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let width = match info.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let raw = bytes
            .get(pos..pos + n * width)
            .ok_or_else(|| err("truncated tensor data"))?;
        pos += n * width;
        tensors.push(match info.dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        });
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let header = Header {
            kind: "test".into(),
            fingerprint: fingerprint(&("cfg", 3)),
            metadata: serde_json::json!({"seed": 7}),
            tensors: vec![
                TensorInfo { shape: vec![2, 2], dtype: DType::F32 },
                TensorInfo { shape: vec![3], dtype: DType::F64 },
            ],
        };
        let data = vec![
            TensorData::F32(vec![1.0, -2.5, f32::MIN_POSITIVE, 0.1]),
            TensorData::F64(vec![0.1, 1e300, -0.0]),
        ];
        write(&path, &header, &data).unwrap();
        let (h, t) = read(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(t, data);

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(read(&path).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(read(&path).is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        assert_eq!(fingerprint(&[1, 2]), fingerprint(&[1, 2]));
        assert_ne!(fingerprint(&[1, 2]), fingerprint(&[2, 1]));
        assert_eq!(fingerprint(&0).len(), 64);
    }
}
