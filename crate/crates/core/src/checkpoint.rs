//! Single-file tensor container.
//!
//! Layout: a UTF-8 text manifest terminated by a line `end`, followed by
//! the payload of little-endian `f32` values. Offsets in the manifest are
//! byte offsets into the payload.
//!
//! ```text
//! ITERSRL-CHECKPOINT 1
//! meta kind baseline
//! tensor encoder/l0/fw/w_x 64x128 0 8192
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "ITERSRL-CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Checkpoint(format!(
            "{kind} `{s}` must be non-empty without whitespace"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every stored tensor into the same-named parameter of `store`.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, t) in &self.tensors {
            let id = store.id(name)?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::shape("restore", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        for (_, name, _) in store.iter() {
            if self.tensor(name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` missing from checkpoint"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            check_token("metadata key", k)?;
            if v.contains('\n') || v.contains('\r') {
                return Err(Error::Checkpoint(format!("metadata `{k}` spans lines")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            header.push_str(&format!(
                "tensor {name} {}x{} {offset} {}\n",
                t.rows(),
                t.cols(),
                t.len()
            ));
            offset += 4 * t.len();
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("manifest terminator not found".into()))?
            + end_marker.len();
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(format!("bad magic line `{first}`")))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }

        let mut ckpt = Checkpoint::new();
        let mut expected_len = 0usize;
        for line in lines {
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| bad(format!("bad line `{line}`")))?;
                    let value = parts.next().unwrap_or("");
                    ckpt.meta.insert(key.to_string(), value.to_string());
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields.len() != 5 {
                        return Err(bad(format!("bad tensor line `{line}`")));
                    }
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| bad(format!("bad number in `{line}`")))
                    };
                    let (rows, cols) = fields[2]
                        .split_once('x')
                        .ok_or_else(|| bad(format!("bad shape in `{line}`")))?;
                    let (rows, cols) = (parse(rows)?, parse(cols)?);
                    let offset = parse(fields[3])?;
                    let count = parse(fields[4])?;
                    if count != rows * cols {
                        return Err(bad(format!("count mismatch in `{line}`")));
                    }
                    let span = payload
                        .get(offset..offset + 4 * count)
                        .ok_or_else(|| bad(format!("payload too short for `{}`", fields[1])))?;
                    let data = span
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    ckpt.tensors
                        .push((fields[1].to_string(), Tensor::matrix(rows, cols, data)?));
                    expected_len = expected_len.max(offset + 4 * count);
                }
                Some("end") => break,
                _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
            }
        }
        if payload.len() != expected_len {
            return Err(bad(format!(
                "payload has {} bytes, manifest describes {expected_len}",
                payload.len()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized container.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
