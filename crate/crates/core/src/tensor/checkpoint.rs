//! Single-file checkpoints: magic, header length, JSON header, then raw
//! little-endian `f64` payloads.
//!
//! ```text
//! b"SEGFUSE\0" | u64 LE header_len | header JSON (header_len bytes) | payload
//! ```
//!
//! Payload offsets in the header are in bytes from the start of the payload.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SEGFUSE\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Model family, e.g. `"segnet"`.
    pub kind: String,
    pub seed: u64,
    /// Model configuration / layer topology.
    pub topology: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// A parameter store together with the metadata needed to rebuild its model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, topology: serde_json::Value, params: &ParamStore) -> Self {
        let mut offset = 0u64;
        let entries = params
            .iter()
            .map(|p| {
                let len = p.value.numel() as u64;
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    len,
                };
                offset += len * 8;
                e
            })
            .collect();
        let mut params = params.clone();
        params.zero_grad();
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                kind: kind.to_string(),
                seed,
                topology,
                params: entries,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&format!("header json: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[header_end..];
        let mut params = ParamStore::new();
        for e in &header.params {
            let start = e.offset as usize;
            let end = start + e.len as usize * 8;
            if end > payload.len() {
                return Err(bad(&format!("payload for '{}' out of range", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_lossless(values in prop::collection::vec(-1e6f64..1e6, 1..40), seed: u64) {
            let mut store = ParamStore::new();
            store.add("a", Tensor::from_vec(values.clone()));
            store.add("b.w", Tensor::new(vec![1, values.len()], values.iter().map(|v| -v).collect()).unwrap());
            let ck = Checkpoint::new("test", seed, serde_json::json!({"layers": 2}), &store);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn header_lists_offsets() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[3]));
        store.add("b", Tensor::zeros(&[2, 2]));
        let ck = Checkpoint::new("x", 7, serde_json::Value::Null, &store);
        assert_eq!(ck.header.params[0].offset, 0);
        assert_eq!(ck.header.params[1].offset, 24);
        assert_eq!(ck.header.params[1].len, 4);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[3]));
        let bytes = Checkpoint::new("x", 0, serde_json::Value::Null, &store).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
