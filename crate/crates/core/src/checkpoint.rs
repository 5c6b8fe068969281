//! `SELDKIT1` tensor container used for model checkpoints and feature caches.
//!
//! Layout:
//!
//! ```text
//! b"SELDKIT1"                 8-byte version tag
//! u64 (LE)                    manifest length in bytes
//! manifest                    UTF-8 JSON: metadata map + tensor entries
//! payload                     little-endian floats, entry offsets relative to here
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, SCALAR_DTYPE};

pub const MAGIC: &[u8; 8] = b"SELDKIT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let pos = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = std::mem::size_of::<Scalar>() as u64;
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: SCALAR_DTYPE.to_string(),
                offset,
            });
            offset += t.len() as u64 * width;
        }
        let manifest = serde_json::to_vec(&Manifest {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing SELDKIT1 version tag"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file size"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let data: Vec<Scalar> = match e.dtype.as_str() {
                "f32" => read_slice(payload, start, n, 4, |b| {
                    f32::from_le_bytes(b.try_into().unwrap()) as Scalar
                }),
                "f64" => read_slice(payload, start, n, 8, |b| {
                    f64::from_le_bytes(b.try_into().unwrap()) as Scalar
                }),
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
            }
            .ok_or_else(|| Error::Checkpoint(format!("tensor {:?} runs past payload", e.name)))?;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_slice(
    payload: &[u8],
    start: usize,
    n: usize,
    width: usize,
    conv: impl Fn(&[u8]) -> Scalar,
) -> Option<Vec<Scalar>> {
    let end = start.checked_add(n.checked_mul(width)?)?;
    let bytes = payload.get(start..end)?;
    Some(bytes.chunks_exact(width).map(conv).collect())
}
