//! Binary checkpoint format for model weights and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CXRCKPT\0" | version u32 | payload_len u64 | payload | sha256(head+payload)
//! payload = meta_len u64 | meta JSON | blob_count u64 | blobs
//! blob    = name_len u64 | name UTF-8 | numel u64 | numel x f32
//! ```
//!
//! Blob names carry a one-letter role prefix: `p:` parameter, `m:` first
//! moment, `v:` second moment. Loads validate in a fixed order so failures
//! are attributable: declared length first (truncation), digest second
//! (corruption), structure last. Saves are atomic (temp + rename) and the
//! byte stream is a pure function of the contents, so save/load roundtrips
//! are bit-exact.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsio::write_atomic;

const MAGIC: &[u8; 8] = b"CXRCKPT\0";
const VERSION: u32 = 1;
const HEAD_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint size mismatch: declared {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("checkpoint digest mismatch: contents are corrupt")]
    ChecksumFailure,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Run context stored alongside the weights. `model` is an opaque JSON value
/// owned by the trainer (its tagged model spec), so this module stays
/// independent of the model zoo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: serde_json::Value,
    pub epoch: u64,
    pub val_accuracy: f64,
    pub opt_step: u64,
    pub base_seed: u64,
}

/// One named f32 buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub values: Vec<f32>,
}

/// A complete checkpoint: metadata, parameters, and (optionally) the two
/// AdamW moment sets. When present, the moment lists must mirror the
/// parameter list name-for-name and length-for-length.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<Blob>,
    pub opt_m: Vec<Blob>,
    pub opt_v: Vec<Blob>,
}

impl Checkpoint {
    fn validate(&self) -> Result<(), CheckpointError> {
        if self.opt_m.len() != self.opt_v.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} first moments vs {} second moments",
                self.opt_m.len(),
                self.opt_v.len()
            )));
        }
        if !self.opt_m.is_empty() {
            if self.opt_m.len() != self.params.len() {
                return Err(CheckpointError::Malformed(format!(
                    "{} moments vs {} parameters",
                    self.opt_m.len(),
                    self.params.len()
                )));
            }
            for ((p, m), v) in self.params.iter().zip(&self.opt_m).zip(&self.opt_v) {
                if p.name != m.name || p.name != v.name {
                    return Err(CheckpointError::Malformed(format!(
                        "moment blobs misaligned at parameter {:?}",
                        p.name
                    )));
                }
                if p.values.len() != m.values.len() || p.values.len() != v.values.len() {
                    return Err(CheckpointError::Malformed(format!(
                        "moment sizes misaligned at parameter {:?}",
                        p.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serialize to the on-disk byte stream.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.validate()?;
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| CheckpointError::Malformed(format!("meta encode: {e}")))?;
        let mut payload = Vec::new();
        payload.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        payload.extend_from_slice(&meta);
        let blob_count = self.params.len() + self.opt_m.len() + self.opt_v.len();
        payload.extend_from_slice(&(blob_count as u64).to_le_bytes());
        let tagged = [("p:", &self.params), ("m:", &self.opt_m), ("v:", &self.opt_v)];
        for (prefix, blobs) in tagged {
            for blob in blobs.iter() {
                let name = format!("{prefix}{}", blob.name);
                payload.extend_from_slice(&(name.len() as u64).to_le_bytes());
                payload.extend_from_slice(name.as_bytes());
                payload.extend_from_slice(&(blob.values.len() as u64).to_le_bytes());
                for v in &blob.values {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(HEAD_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parse the on-disk byte stream. Checks, in order: magic, version,
    /// declared length vs actual, digest, structure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEAD_LEN {
            return Err(CheckpointError::SizeMismatch {
                expected: HEAD_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion(version));
        }
        let payload_len = u64::from_le_bytes(bytes[12..HEAD_LEN].try_into().unwrap());
        let expected = HEAD_LEN as u64 + payload_len + DIGEST_LEN as u64;
        if bytes.len() as u64 != expected {
            return Err(CheckpointError::SizeMismatch {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let body_end = HEAD_LEN + payload_len as usize;
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(CheckpointError::ChecksumFailure);
        }

        let mut cur = Cursor {
            bytes: &bytes[HEAD_LEN..body_end],
            pos: 0,
        };
        let meta_len = cur.take_u64()? as usize;
        let meta_bytes = cur.take(meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| CheckpointError::Malformed(format!("meta decode: {e}")))?;
        let blob_count = cur.take_u64()? as usize;
        let mut params = Vec::new();
        let mut opt_m = Vec::new();
        let mut opt_v = Vec::new();
        for i in 0..blob_count {
            let name_len = cur.take_u64()? as usize;
            let name_bytes = cur.take(name_len)?;
            let full = std::str::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Malformed(format!("blob {i}: name not UTF-8")))?;
            let numel = cur.take_u64()? as usize;
            let raw = cur.take(numel.checked_mul(4).ok_or_else(|| {
                CheckpointError::Malformed(format!("blob {i}: element count overflows"))
            })?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (prefix, name) = full.split_at(full.len().min(2));
            let blob = Blob {
                name: name.to_string(),
                values,
            };
            match prefix {
                "p:" => params.push(blob),
                "m:" => opt_m.push(blob),
                "v:" => opt_v.push(blob),
                _ => {
                    return Err(CheckpointError::Malformed(format!(
                        "blob {i}: unknown role prefix in {full:?}"
                    )))
                }
            }
        }
        if cur.pos != cur.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing payload bytes",
                cur.bytes.len() - cur.pos
            )));
        }
        let ckpt = Checkpoint {
            meta,
            params,
            opt_m,
            opt_v,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Write atomically to `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CheckpointError::Malformed(format!(
                "payload ends inside a field ({n} bytes wanted at offset {})",
                self.pos
            ))),
        }
    }

    fn take_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
