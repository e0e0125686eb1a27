//! Binary tensor container.
//!
//! One format backs checkpoints, cached volumes, and attribution maps:
//!
//! ```text
//! bytes 0..8    magic  b"XSEG3DTC"
//! bytes 8..12   format version, u32 little-endian (currently 1)
//! bytes 12..20  header length H, u64 little-endian
//! bytes 20..20+H JSON header: { meta, entries: [{name, dtype, shape, offset, byte_len}] }
//! then          payload: raw little-endian element data, offsets relative to payload start
//! ```
//!
//! Entries preserve insertion order and offsets are ascending, so writing the
//! same content twice produces identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"XSEG3DTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<HeaderEntry>,
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// An ordered set of named, typed, shaped binary blobs plus a JSON meta
/// document.
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_f64(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_u16(values: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn entry_shape(&self, name: &str) -> Result<&[usize], FormatError> {
        self.find(name).map(|e| e.shape.as_slice())
    }

    pub fn entry_dtype(&self, name: &str) -> Result<Dtype, FormatError> {
        self.find(name).map(|e| e.dtype)
    }

    fn find(&self, name: &str) -> Result<&Entry, FormatError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| FormatError::MissingEntry { name: name.into() })
    }

    fn push(&mut self, name: &str, dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) {
        debug_assert_eq!(
            shape.iter().product::<usize>() * dtype.size_bytes(),
            bytes.len()
        );
        debug_assert!(!self.contains(name), "duplicate entry {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            dtype,
            shape,
            bytes,
        });
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let bytes = match T::DTYPE {
            Dtype::F32 => encode_f32(&t.data().iter().map(|v| v.as_f64() as f32).collect::<Vec<_>>()),
            Dtype::F64 => encode_f64(&t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
            _ => unreachable!("Scalar is floating point"),
        };
        self.push(name, T::DTYPE, t.shape().to_vec(), bytes);
    }

    pub fn put_u8(&mut self, name: &str, shape: Vec<usize>, data: &[u8]) {
        self.push(name, Dtype::U8, shape, data.to_vec());
    }

    pub fn put_u16(&mut self, name: &str, shape: Vec<usize>, data: &[u16]) {
        self.push(name, Dtype::U16, shape, encode_u16(data));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>, FormatError> {
        let e = self.find(name)?;
        if e.dtype != T::DTYPE {
            return Err(FormatError::DtypeMismatch {
                name: name.into(),
                expected: T::DTYPE.name(),
                found: e.dtype.name().into(),
            });
        }
        let step = e.dtype.size_bytes();
        let data: Vec<T> = e
            .bytes
            .chunks_exact(step)
            .map(|c| match T::DTYPE {
                Dtype::F32 => T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
                Dtype::F64 => T::from_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ])),
                _ => unreachable!(),
            })
            .collect();
        Tensor::from_vec(e.shape.clone(), data).map_err(|_| FormatError::EntryShapeMismatch {
            name: name.into(),
            expected: e.shape.clone(),
            found: vec![e.bytes.len() / step],
        })
    }

    pub fn u8_entry(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>), FormatError> {
        let e = self.find(name)?;
        if e.dtype != Dtype::U8 {
            return Err(FormatError::DtypeMismatch {
                name: name.into(),
                expected: "u8",
                found: e.dtype.name().into(),
            });
        }
        Ok((e.shape.clone(), e.bytes.clone()))
    }

    pub fn u16_entry(&self, name: &str) -> Result<(Vec<usize>, Vec<u16>), FormatError> {
        let e = self.find(name)?;
        if e.dtype != Dtype::U16 {
            return Err(FormatError::DtypeMismatch {
                name: name.into(),
                expected: "u16",
                found: e.dtype.name().into(),
            });
        }
        let data = e
            .bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok((e.shape.clone(), data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<HeaderEntry> = self
            .entries
            .iter()
            .map(|e| {
                let he = HeaderEntry {
                    name: e.name.clone(),
                    dtype: e.dtype.name().into(),
                    shape: e.shape.clone(),
                    offset,
                    byte_len: e.bytes.len() as u64,
                };
                offset += e.bytes.len() as u64;
                he
            })
            .collect();
        let header = Header {
            meta: self.meta.clone(),
            entries,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(20 + header_json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container, FormatError> {
        if bytes.len() < 20 {
            return Err(FormatError::Truncated {
                needed: 20,
                available: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20 + header_len;
        if bytes.len() < payload_start {
            return Err(FormatError::Truncated {
                needed: payload_start,
                available: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| FormatError::Header(e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut entries = Vec::with_capacity(header.entries.len());
        for he in header.entries {
            let dtype = Dtype::from_name(&he.dtype)
                .ok_or_else(|| FormatError::Header(format!("unknown dtype `{}`", he.dtype)))?;
            let expected = he.shape.iter().product::<usize>() * dtype.size_bytes();
            if he.byte_len as usize != expected {
                return Err(FormatError::EntryShapeMismatch {
                    name: he.name,
                    expected: he.shape,
                    found: vec![he.byte_len as usize / dtype.size_bytes()],
                });
            }
            let start = he.offset as usize;
            let end = start + he.byte_len as usize;
            if end > payload.len() {
                return Err(FormatError::Truncated {
                    needed: payload_start + end,
                    available: bytes.len(),
                });
            }
            entries.push(Entry {
                name: he.name,
                dtype,
                shape: he.shape,
                bytes: payload[start..end].to_vec(),
            });
        }
        Ok(Container {
            meta: header.meta,
            entries,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), FormatError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Container, FormatError> {
        let bytes = fs::read(path)?;
        Container::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut c = Container::new(json!({"kind": "test", "epoch": 3}));
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, -0.125, 9.0]).unwrap();
        c.put_tensor("w", &t);
        c.put_u8("mask", vec![4], &[0, 1, 1, 0]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        let t2: Tensor<f32> = back.tensor("w").unwrap();
        assert_eq!(t2.shape(), &[2, 3]);
        assert_eq!(t2.data(), t.data());
        assert_eq!(back.u8_entry("mask").unwrap().1, vec![0, 1, 1, 0]);
        // serialization is deterministic
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let c = Container::new(json!({}));
        let mut bytes = c.to_bytes();
        bytes[0] = b'Z';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(FormatError::BadMagic)
        ));
    }

    #[test]
    fn version_mismatch_detected() {
        let c = Container::new(json!({}));
        let mut bytes = c.to_bytes();
        bytes[8] = 99;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(FormatError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncation_detected() {
        let mut c = Container::new(json!({}));
        c.put_u8("m", vec![8], &[1; 8]);
        let bytes = c.to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn dtype_mismatch_detected() {
        let mut c = Container::new(json!({}));
        c.put_tensor("w", &Tensor::<f32>::zeros(vec![2]));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert!(matches!(
            back.tensor::<f64>("w"),
            Err(FormatError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn missing_entry_named() {
        let c = Container::new(json!({}));
        let err = c.tensor::<f32>("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
