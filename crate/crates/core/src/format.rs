//! Binary tensor container shared by checkpoints, masks and plans.
//!
//! Layout:
//!
//! ```text
//! u64 (little-endian)   length of the JSON header in bytes
//! JSON header           {"format", "version", "meta", "tensors": [{name, shape, dtype, offset, nbytes}]}
//! payload               tensors back to back in manifest order
//! ```
//!
//! `f32`/`f64` tensors are little-endian IEEE floats. `bits` tensors are
//! bit-packed, least-significant bit first, padded to a whole byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LccError, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F64,
    Bits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

pub enum TensorData<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
    Bits(&'a [bool]),
}

impl TensorData<'_> {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::Bits(v) => v.len(),
        }
    }
}

pub fn encode(format: &str, meta: Value, tensors: &[(String, Vec<usize>, TensorData<'_>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in tensors {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LccError::shape(
                format!("{name}: {numel} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        let offset = payload.len();
        let dtype = match data {
            TensorData::F32(v) => {
                v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
                DType::F32
            }
            TensorData::F64(v) => {
                v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
                DType::F64
            }
            TensorData::Bits(v) => {
                payload.extend(pack_bits(v));
                DType::Bits
            }
        };
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype,
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let header = Header {
        format: format.to_string(),
        version: VERSION,
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// A parsed container borrowing its payload.
pub struct Decoded<'a> {
    pub header: Header,
    payload: &'a [u8],
}

pub fn decode<'a>(bytes: &'a [u8], format: &str) -> Result<Decoded<'a>> {
    if bytes.len() < 8 {
        return Err(LccError::Format("file shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if hlen > body.len() {
        return Err(LccError::Format(format!(
            "header length {hlen} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| LccError::Format(format!("bad header: {e}")))?;
    if header.format != format {
        return Err(LccError::Format(format!(
            "expected a `{format}` file, found `{}`",
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(LccError::Format(format!("unsupported version {}", header.version)));
    }
    let payload = &body[hlen..];
    let mut expected_offset = 0;
    for e in &header.tensors {
        let want = match e.dtype {
            DType::F32 => e.numel() * 4,
            DType::F64 => e.numel() * 8,
            DType::Bits => e.numel().div_ceil(8),
        };
        if e.nbytes != want || e.offset != expected_offset || e.offset + e.nbytes > payload.len() {
            return Err(LccError::Format(format!("tensor `{}` has an inconsistent extent", e.name)));
        }
        expected_offset += e.nbytes;
    }
    if expected_offset != payload.len() {
        return Err(LccError::Format(format!(
            "payload has {} trailing bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(Decoded { header, payload })
}

impl Decoded<'_> {
    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| LccError::Format(format!("missing tensor `{name}`")))
    }

    fn bytes(&self, e: &TensorEntry) -> &[u8] {
        &self.payload[e.offset..e.offset + e.nbytes]
    }

    pub fn f32(&self, name: &str) -> Result<Vec<f32>> {
        let e = self.entry(name)?;
        if e.dtype != DType::F32 {
            return Err(LccError::Format(format!("`{name}` is not f32")));
        }
        Ok(self
            .bytes(e)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64(&self, name: &str) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        if e.dtype != DType::F64 {
            return Err(LccError::Format(format!("`{name}` is not f64")));
        }
        Ok(self
            .bytes(e)
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bits(&self, name: &str) -> Result<Vec<bool>> {
        let e = self.entry(name)?;
        if e.dtype != DType::Bits {
            return Err(LccError::Format(format!("`{name}` is not a bit array")));
        }
        Ok(unpack_bits(self.bytes(e), e.numel()))
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| LccError::io(parent, e))?;
        }
    }
    // write-then-rename so readers never observe a partial file
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| LccError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LccError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LccError::io(path, e))
}
