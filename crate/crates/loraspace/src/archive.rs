//! Named tensor archive.
//!
//! Layout of an archive file:
//!
//! ```text
//! +-------------+------------------+------------------+------------------+
//! | magic       | version (u32 LE) | header len (u64  | JSON header      |
//! | "HLRA"      |        = 1       | LE)              | (UTF-8)          |
//! +-------------+------------------+------------------+------------------+
//! | raw tensor data, little-endian, in header order                      |
//! +-----------------------------------------------------------------------+
//! ```
//!
//! The JSON header maps each key to `{dtype, shape, byte_offset, byte_length}`
//! with offsets relative to the start of the data section. Keys are written
//! in sorted order so the same tensors always produce the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::params::Params;

pub const MAGIC: &[u8; 4] = b"HLRA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
            TensorData::I32(v) => v.len() * 4,
            TensorData::U8(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::I32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: &str, bytes: &[u8], offset: u64) -> Result<TensorData> {
        let elem = match dtype {
            "f32" | "i32" => 4,
            "f64" => 8,
            "u8" => 1,
            other => return Err(Error::format(offset, format!("unknown dtype `{other}`"))),
        };
        if bytes.len() % elem != 0 {
            return Err(Error::format(
                offset,
                format!("data length {} not a multiple of {elem}", bytes.len()),
            ));
        }
        Ok(match dtype {
            "f32" => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            "f64" => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect(),
            ),
            "i32" => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            _ => TensorData::U8(bytes.to_vec()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedTensor {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn from_array(a: &Array<f32>) -> Self {
        NamedTensor::f32(a.shape().to_vec(), a.data().to_vec())
    }

    pub fn to_array(&self) -> Result<Array<f32>> {
        match &self.data {
            TensorData::F32(v) => Array::from_vec(self.shape.clone(), v.clone()),
            other => Err(Error::InvalidDimensions {
                op: "NamedTensor::to_array",
                message: format!("expected f32 tensor, got {}", other.dtype()),
            }),
        }
    }

    /// UTF-8 payload stored as a u8 tensor.
    pub fn text(s: &str) -> Self {
        NamedTensor {
            shape: vec![s.len()],
            data: TensorData::U8(s.as_bytes().to_vec()),
        }
    }

    pub fn as_text(&self) -> Result<String> {
        match &self.data {
            TensorData::U8(v) => String::from_utf8(v.clone()).map_err(|e| Error::InvalidDimensions {
                op: "NamedTensor::as_text",
                message: e.to_string(),
            }),
            other => Err(Error::InvalidDimensions {
                op: "NamedTensor::as_text",
                message: format!("expected u8 tensor, got {}", other.dtype()),
            }),
        }
    }
}

pub type Archive = BTreeMap<String, NamedTensor>;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

/// Serialize an archive to bytes.
pub fn to_bytes(tensors: &Archive) -> Result<Vec<u8>> {
    let mut header: BTreeMap<&str, HeaderEntry> = BTreeMap::new();
    let mut offset = 0u64;
    for (key, t) in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::InvalidDimensions {
                op: "archive::to_bytes",
                message: format!("key `{key}`: shape {:?} vs {} elements", t.shape, t.data.len()),
            });
        }
        let byte_length = t.data.byte_len() as u64;
        header.insert(
            key,
            HeaderEntry {
                dtype: t.data.dtype().to_string(),
                shape: t.shape.clone(),
                byte_offset: offset,
                byte_length,
            },
        );
        offset += byte_length;
    }
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in tensors.values() {
        t.data.write_le(&mut out);
    }
    Ok(out)
}

/// Parse an archive from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic bytes, expected \"HLRA\""));
    }
    if bytes.len() < 8 {
        return Err(Error::format(4, "truncated before version field"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if bytes.len() < 16 {
        return Err(Error::format(8, "truncated before header length"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| {
        Error::format(8, "header length overflows")
    })?;
    if bytes.len() < header_end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: expected {header_len} bytes"),
        ));
    }
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| {
            Error::format(16, format!("invalid JSON header: {e}"))
        })?;

    let data = &bytes[header_end..];
    let mut out = Archive::new();
    for (key, entry) in header {
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_length as usize;
        if end > data.len() {
            return Err(Error::format(
                (header_end + data.len()) as u64,
                format!("truncated data for key `{key}`: needs bytes {start}..{end}"),
            ));
        }
        let td = TensorData::read_le(&entry.dtype, &data[start..end], (header_end + start) as u64)?;
        let n: usize = entry.shape.iter().product();
        if n != td.len() {
            return Err(Error::format(
                (header_end + start) as u64,
                format!("key `{key}`: shape {:?} vs {} elements", entry.shape, td.len()),
            ));
        }
        out.insert(
            key,
            NamedTensor {
                shape: entry.shape,
                data: td,
            },
        );
    }
    Ok(out)
}

pub fn save_archive(path: impl AsRef<Path>, tensors: &Archive) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(tensors)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::io(path.display().to_string(), e)
        }
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

/// Every parameter as an f32 tensor keyed by its parameter name.
pub fn params_to_tensors(params: &Params<f32>) -> Archive {
    params
        .iter()
        .map(|(name, a)| (name.to_string(), NamedTensor::from_array(a)))
        .collect()
}

/// Rebuild a parameter store from the archive keys selected by `pred`.
pub fn tensors_to_params(archive: &Archive, pred: impl Fn(&str) -> bool) -> Result<Params<f32>> {
    let mut params = Params::new();
    for (key, t) in archive {
        if pred(key) {
            params.insert(key.clone(), t.to_array()?);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_archive() -> Archive {
        let mut a = Archive::new();
        a.insert(
            "w.first".into(),
            NamedTensor::f32(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.5]),
        );
        a.insert(
            "ids".into(),
            NamedTensor {
                shape: vec![4],
                data: TensorData::I32(vec![-7, 0, 3, 12]),
            },
        );
        a.insert("meta".into(), NamedTensor::text("{\"k\":1}"));
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample_archive();
        let bytes = to_bytes(&a).unwrap();
        let b = from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        // Serialization of equal archives is byte-identical.
        assert_eq!(bytes, to_bytes(&b).unwrap());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let a = sample_archive();
        let mut bytes = to_bytes(&a).unwrap();
        bytes[0] = b'X';
        match from_bytes(&bytes) {
            Err(crate::error::Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_rejected_with_offset() {
        let a = sample_archive();
        let bytes = to_bytes(&a).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            from_bytes(cut),
            Err(crate::error::Error::Format { .. })
        ));
    }

    #[test]
    fn bad_version_rejected() {
        let a = sample_archive();
        let mut bytes = to_bytes(&a).unwrap();
        bytes[4] = 9;
        match from_bytes(&bytes) {
            Err(crate::error::Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
