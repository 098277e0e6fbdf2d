//! Self-describing checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "EMTNCKPT"
//! version    u32
//! header_len u64
//! header     header_len bytes of JSON: kind, architecture, metadata, tensor index
//! payload    f32 values of every indexed tensor, in index order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::layers::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMTNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    architecture: Value,
    metadata: BTreeMap<String, Value>,
    tensors: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub architecture: Value,
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, architecture: Value) -> Self {
        Self {
            kind: kind.into(),
            architecture,
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Stores every tensor of `set` under `group/`.
    pub fn put_group(&mut self, group: &str, set: &ParamSet<f32>) {
        for (name, t) in set.iter() {
            self.tensors.insert(format!("{group}/{name}"), t.clone());
        }
    }

    pub fn group(&self, group: &str) -> Result<ParamSet<f32>> {
        let prefix = format!("{group}/");
        let mut set = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&prefix) {
                set.insert(rest, t.clone())?;
            }
        }
        if set.is_empty() {
            return Err(Error::Format(format!("checkpoint has no `{group}` tensors")));
        }
        Ok(set)
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            index.push(IndexEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| Error::Format(format!("truncated payload for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected = expected.max(e.offset + n);
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        if payload.len() != expected * 4 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            architecture: header.architecture,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(Value::as_str)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.metadata.get(key).and_then(Value::as_u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40),
                            step in any::<u64>()) {
            let mut set = ParamSet::new();
            set.insert("a.weight", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
            set.insert("b", Tensor::scalar(1.5)).unwrap();
            let mut ck = Checkpoint::new("test", serde_json::json!({"layers": [1, 2]}));
            ck.metadata.insert("step".into(), step.into());
            ck.put_group("params", &set);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.group("params").unwrap(), set);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }
}
