//! Named-tensor checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MRWT"  u8 version=1  u32 header_len  header (JSON, header_len bytes)  blobs
//! ```
//!
//! The header lists every tensor as `{name, shape, offset}` where `offset` is
//! the byte offset of its `f64` blob from the start of the blob section, plus a
//! free-form `metadata` object.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRWT";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u8,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts every tensor of `source` under `prefix/`.
    pub fn insert_prefixed<'a>(
        &mut self,
        prefix: &str,
        source: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) {
        for (name, t) in source {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Tensors stored under `prefix/`, with the prefix stripped.
    pub fn take_prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Manifest {
            format_version: VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(9 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(path, d);
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(bad("missing MRWT magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let blob_start = 9 + header_len;
        if bytes.len() < blob_start {
            return Err(bad("truncated header"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[9..blob_start])
            .map_err(|e| bad(&format!("bad header: {e}")))?;
        let blobs = &bytes[blob_start..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blobs.len() {
                return Err(bad(&format!("tensor `{}` runs past end of file", e.name)));
            }
            let data = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(&err.to_string()))?;
            tensors.insert(e.name, t);
        }
        Ok(Checkpoint {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_lossless(values in proptest::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let cols = values.len().div_ceil(rows);
            let mut data = values.clone();
            data.resize(rows * cols, 0.5);
            let mut ck = Checkpoint::new();
            ck.metadata.insert("note".into(), serde_json::json!("x"));
            ck.tensors.insert("a/w".into(), Tensor::matrix(rows, cols, data).unwrap());
            ck.tensors.insert("b".into(), Tensor::scalar(values[0]));
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = Checkpoint::new();
        ck.tensors.insert("w".into(), Tensor::ones(&[3]));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MRWT");
        assert_eq!(bytes[4], 1);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, Path::new("m")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
    }
}
