//! Binary checkpoint format.
//!
//! ```text
//! "L2SKD" 0x01                       magic + format version
//! u64 len, len bytes                 manifest (UTF-8 JSON)
//! repeated until EOF:
//!   u64 len, len bytes               tensor name (UTF-8)
//!   u64 rows, u64 cols
//!   rows*cols f64                    row-major values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"L2SKD";
pub const FORMAT_VERSION: u8 = 1;

const MAX_NAME_LEN: u64 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    manifest: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(manifest: serde_json::Value) -> Self {
        Checkpoint {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn manifest(&self) -> &serde_json::Value {
        &self.manifest
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.tensors.iter().map(|(n, t)| 24 + n.len() + 8 * t.len()).sum();
        let mut out = Vec::with_capacity(6 + 8 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(6, "magic bytes")?;
        if &magic[..5] != MAGIC {
            return Err(Error::Format("bad magic bytes, not an L2SKD checkpoint".into()));
        }
        if magic[5] != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                magic[5]
            )));
        }
        let manifest_len = r.len_prefix("manifest")?;
        let manifest = serde_json::from_slice(r.take(manifest_len, "manifest")?)
            .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;

        let mut tensors = Vec::new();
        while !r.at_end() {
            let name_len = r.u64("tensor name length")?;
            if name_len > MAX_NAME_LEN {
                return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
            }
            let name = std::str::from_utf8(r.take(name_len as usize, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64("tensor rows")? as usize;
            let cols = r.u64("tensor cols")? as usize;
            let n_bytes = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} shape overflows")))?;
            let raw = r.take(n_bytes, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, only {remaining} left",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len_prefix(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Format(format!("{what} length {n} too large")))
    }
}
