//! `IDCR` tensor container: magic, u32 version, u64 header length, JSON
//! header, then little-endian f64 payloads. Shared by checkpoints and datasets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IDCR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: Value,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` not present")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Corrupt(format!("{} bytes is shorter than the magic", bytes.len())));
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != MAGIC {
            return Err(Error::BadMagic { found });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if hlen > body.len() as u64 {
            return Err(Error::Corrupt(format!(
                "header claims {hlen} bytes, only {} remain",
                body.len()
            )));
        }
        let (hbytes, payload) = body.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(hbytes)
            .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Corrupt(format!("shape of `{}` overflows", e.name)))?;
            let end = numel
                .checked_mul(8)
                .and_then(|n| n.checked_add(e.offset))
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| {
                    Error::Corrupt(format!(
                        "tensor `{}` at offset {} exceeds the {}-byte payload",
                        e.name,
                        e.offset,
                        payload.len()
                    ))
                })?;
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data)
                .map_err(|err| Error::Corrupt(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
