//! Self-describing container: a JSON metadata header plus named tensors.
//! Used for model checkpoints, measurement files, and dataset volumes.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic      b"CVCT"
//! version    u32 (currently 1)
//! header_len u64, header: UTF-8 JSON
//! count      u64
//! entries    count x { name_len u64, name UTF-8, blob_len u64, blob (tensor-file bytes) }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use super::tensor_file::{read_tensor_from, write_tensor_to, Tensor};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CVCT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: impl Into<Tensor>) {
        self.entries.push((name.into(), tensor.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Container::get`] but failing with a descriptive error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Corrupt {
            path: String::new(),
            reason: format!("container is missing tensor {name:?}"),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let mut blob = Vec::new();
            write_tensor_to(&mut blob, tensor)?;
            w.write_all(&(blob.len() as u64).to_le_bytes())?;
            w.write_all(&blob)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let corrupt = |reason: &str| Error::Corrupt {
            path: path_str.clone(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path.as_ref()).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path_str.clone())
            } else {
                Error::Io(e)
            }
        })?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("too short for magic"))?;
        if &magic != CONTAINER_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4).map_err(|_| corrupt("truncated version"))?;
        let version = u32::from_le_bytes(v4);
        if version != CONTAINER_VERSION {
            return Err(Error::Version { expected: CONTAINER_VERSION, found: version });
        }

        let mut v8 = [0u8; 8];
        r.read_exact(&mut v8).map_err(|_| corrupt("truncated header length"))?;
        let mut header = vec![0u8; u64::from_le_bytes(v8) as usize];
        r.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
        let meta: serde_json::Value = serde_json::from_slice(&header)
            .map_err(|e| corrupt(&format!("header is not JSON: {e}")))?;

        r.read_exact(&mut v8).map_err(|_| corrupt("truncated entry count"))?;
        let count = u64::from_le_bytes(v8) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut v8).map_err(|_| corrupt("truncated name length"))?;
            let mut name = vec![0u8; u64::from_le_bytes(v8) as usize];
            r.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("name is not UTF-8"))?;
            r.read_exact(&mut v8).map_err(|_| corrupt("truncated blob length"))?;
            let mut blob = vec![0u8; u64::from_le_bytes(v8) as usize];
            r.read_exact(&mut blob).map_err(|_| corrupt("truncated tensor blob"))?;
            let tensor = read_tensor_from(&mut Cursor::new(blob), &path_str)?;
            entries.push((name, tensor));
        }
        Ok(Self { meta, entries })
    }
}
