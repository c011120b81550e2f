//! Named parameter tensors and their binary file format.
//!
//! File layout: an 8-byte little-endian header length `n`, then `n` bytes
//! of UTF-8 JSON describing each tensor, then the concatenated tensor data
//! as little-endian `f32`. Offsets in the header are in bytes from the start
//! of the data section.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::WeightError;

pub const FORMAT_TAG: &str = "slicewise-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters keyed by `"<param_ref>.<param name>"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    entries: BTreeMap<String, WeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: Vec<HeaderEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<(), WeightError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(WeightError::WrongSize { name, got: data.len(), expected });
        }
        self.entries.insert(name, WeightEntry { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&WeightEntry, WeightError> {
        self.entries.get(name).ok_or_else(|| WeightError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_elems(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), WeightError> {
        let mut offset = 0;
        let tensors = self
            .entries
            .iter()
            .map(|(name, e)| {
                let entry = HeaderEntry { name: name.clone(), shape: e.shape.clone(), offset, nbytes: e.data.len() * 4 };
                offset += entry.nbytes;
                entry
            })
            .collect();
        let header = Header { format: FORMAT_TAG.into(), version: FORMAT_VERSION, tensors };
        let json = serde_json::to_vec(&header).map_err(|e| WeightError::Format(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for e in self.entries.values() {
            let mut buf = Vec::with_capacity(e.data.len() * 4);
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, WeightError> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| WeightError::Format("header too large".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| WeightError::Format(e.to_string()))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(WeightError::Format(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut bundle = WeightBundle::new();
        for t in header.tensors {
            let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= data.len() && t.nbytes % 4 == 0);
            let end = end.ok_or_else(|| WeightError::Format(format!("{} lies outside the data section", t.name)))?;
            let values = data[t.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            bundle.insert(t.name, t.shape, values)?;
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let mut b = WeightBundle::new();
        b.insert("a.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]).unwrap();
        b.insert("a.bias", vec![2], vec![0.5, -0.5]).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(WeightBundle::read_from(bytes.as_slice()).unwrap(), b);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut b = WeightBundle::new();
        assert!(matches!(b.insert("x", vec![2, 2], vec![0.0; 3]), Err(WeightError::WrongSize { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut b = WeightBundle::new();
        b.insert("x", vec![4], vec![1.0; 4]).unwrap();
        let bytes = b.to_bytes();
        assert!(WeightBundle::read_from(&bytes[..bytes.len() - 2]).is_err());
    }
}
