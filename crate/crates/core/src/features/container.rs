//! The tensor container: `G2SFTNS1`, a little-endian `u32` header length, a
//! canonical (sorted-key) JSON header and a C-order little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"G2SFTNS1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32le",
            TensorData::U8(_) => "u8",
        }
    }
}

/// A decoded container. `meta` holds every header key other than `shape`,
/// `dtype` and `order`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub meta: BTreeMap<String, Value>,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data: TensorData::F32(data), meta: BTreeMap::new() }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self { shape, data: TensorData::U8(data), meta: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::format(8, "expected f32le payload, found u8")),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::format(8, "expected u8 payload, found f32le")),
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let expected: usize = t.shape.iter().product();
    if expected != t.data.len() {
        return Err(Error::shape(format!("shape {:?} holds {expected} values, payload has {}", t.shape, t.data.len())));
    }
    let mut header: BTreeMap<String, Value> = t.meta.clone();
    header.insert("shape".into(), Value::from(t.shape.clone()));
    header.insert("dtype".into(), Value::from(t.data.dtype()));
    header.insert("order".into(), Value::from("C"));
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(12 + header.len() + t.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "file shorter than container preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(Error::format(12, format!("header of {hlen} bytes is truncated")));
    }
    let mut header: BTreeMap<String, Value> =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(12, format!("header json: {e}")))?;

    let shape: Vec<usize> = header
        .remove("shape")
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| Error::format(12, "header missing integer `shape`"))?;
    let dtype = header
        .remove("dtype")
        .and_then(|v| v.as_str().map(str::to_owned))
        .ok_or_else(|| Error::format(12, "header missing `dtype`"))?;
    match header.remove("order").as_ref().and_then(Value::as_str) {
        Some("C") => {}
        _ => return Err(Error::format(12, "only C order is supported")),
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[body..];
    let data = match dtype.as_str() {
        "f32le" => {
            if payload.len() != count * 4 {
                return Err(Error::format(
                    (body + payload.len().min(count * 4)) as u64,
                    format!("payload has {} bytes, shape needs {}", payload.len(), count * 4),
                ));
            }
            let mut v = Vec::with_capacity(count);
            for (i, chunk) in payload.chunks_exact(4).enumerate() {
                let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !x.is_finite() {
                    return Err(Error::format((body + i * 4) as u64, "non-finite value"));
                }
                v.push(x);
            }
            TensorData::F32(v)
        }
        "u8" => {
            if payload.len() != count {
                return Err(Error::format(
                    (body + payload.len().min(count)) as u64,
                    format!("payload has {} bytes, shape needs {count}", payload.len()),
                ));
            }
            TensorData::U8(payload.to_vec())
        }
        other => return Err(Error::format(12, format!("unsupported dtype `{other}`"))),
    };
    Ok(Tensor { shape, data, meta: header })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}
