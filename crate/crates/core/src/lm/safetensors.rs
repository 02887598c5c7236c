//! Minimal reader for the `safetensors` weight format: a little-endian `u64`
//! header length, a JSON header mapping tensor names to dtype, shape and
//! byte offsets, then the raw tensor bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{ArrayD, IxDyn};
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub struct SafeTensors {
    data: Vec<u8>,
    base: usize,
    entries: BTreeMap<String, Entry>,
}

impl SafeTensors {
    pub fn open(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(data)
    }

    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        if data.len() < 8 {
            return Err(Error::Lm("safetensors file too short".into()));
        }
        let header_len = LittleEndian::read_u64(&data[..8]) as usize;
        let end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Lm("safetensors header exceeds file".into()))?;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&data[8..end])?;
        let mut entries = BTreeMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            entries.insert(name, serde_json::from_value::<Entry>(value)?);
        }
        Ok(SafeTensors {
            data,
            base: end,
            entries,
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Loads a tensor converted to `f32`.
    pub fn tensor(&self, name: &str) -> Result<ArrayD<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Lm(format!("weight `{name}` not found")))?;
        let [start, stop] = e.data_offsets;
        let bytes = self
            .data
            .get(self.base + start..self.base + stop)
            .ok_or_else(|| Error::Lm(format!("weight `{name}` out of bounds")))?;
        let values: Vec<f32> = match e.dtype.as_str() {
            "F32" => bytes.chunks_exact(4).map(LittleEndian::read_f32).collect(),
            "F64" => bytes
                .chunks_exact(8)
                .map(|c| LittleEndian::read_f64(c) as f32)
                .collect(),
            "F16" => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_bits(LittleEndian::read_u16(c)).to_f32())
                .collect(),
            "BF16" => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_bits(LittleEndian::read_u16(c)).to_f32())
                .collect(),
            other => return Err(Error::Lm(format!("unsupported dtype {other} for `{name}`"))),
        };
        ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| Error::Lm(format!("weight `{name}`: {err}")))
    }
}

/// Serializes `f32` tensors into the same format. Used to build fixtures and
/// to export embedding tables.
pub fn serialize(tensors: &[(&str, &ArrayD<f32>)]) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let len = t.len() * 4;
        header.insert(
            name.to_string(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.shape(),
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    let mut len = [0u8; 8];
    LittleEndian::write_u64(&mut len, json.len() as u64);
    out.extend_from_slice(&len);
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.iter() {
            let mut b = [0u8; 4];
            LittleEndian::write_f32(&mut b, *v);
            out.extend_from_slice(&b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[1]), vec![-0.5f32]).unwrap();
        let bytes = serialize(&[("a", &a), ("b.bias", &b)]);
        let st = SafeTensors::from_bytes(bytes).unwrap();
        assert_eq!(st.tensor("a").unwrap(), a);
        assert_eq!(st.tensor("b.bias").unwrap(), b);
        assert!(st.tensor("c").is_err());
    }

    #[test]
    fn truncated_header_is_rejected() {
        let mut bytes = vec![0u8; 8];
        LittleEndian::write_u64(&mut bytes, 100);
        assert!(SafeTensors::from_bytes(bytes).is_err());
    }
}
