//! Versioned binary container for named `f64` matrices plus JSON metadata.
//!
//! Every file the crate writes (frozen encoder weights, run checkpoints,
//! datasets, embedding archives) uses this layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes   "DAMPCTR\0"
//! version    u32       FORMAT_VERSION
//! kind       u32 len + UTF-8
//! metadata   u32 len + UTF-8 JSON
//! count      u32
//! count x {  name u32 len + UTF-8, rows u64, cols u64, rows*cols f64 }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{DampError, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"DAMPCTR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Matrix<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix<f64>) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| DampError::Format(format!("{} container has no tensor '{name}'", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(DampError::Format(format!(
                "expected a '{kind}' container, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta_usize(&self, field: &str) -> Result<usize> {
        self.meta
            .get(field)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| DampError::Format(format!("metadata field '{field}' missing or not an integer")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.meta.to_string());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(DampError::Format("bad magic; not a container file".into()));
        }
        let version = get_u32(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(DampError::Format(format!(
                "version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let kind = get_str(&mut r, "kind")?;
        let meta_text = get_str(&mut r, "metadata")?;
        let meta: Value = serde_json::from_str(&meta_text)
            .map_err(|e| DampError::Format(format!("metadata is not valid JSON: {e}")))?;
        let count = get_u32(&mut r, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name = get_str(&mut r, "tensor name")?;
            let rows = get_u64(&mut r, "rows")? as usize;
            let cols = get_u64(&mut r, "cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| {
                    DampError::Format(format!("tensor {i} '{name}' ({rows}x{cols}) exceeds file size"))
                })?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "tensor data")?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if !r.is_empty() {
            return Err(DampError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], field: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(DampError::Format(format!("truncated while reading {field}")));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn get_u32(r: &mut &[u8], field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8], field: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, field)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8], field: &str) -> Result<String> {
    let n = get_u32(r, field)? as usize;
    let mut buf = vec![0u8; n.min(r.len())];
    if n > r.len() {
        return Err(DampError::Format(format!("truncated while reading {field}")));
    }
    read_exact(r, &mut buf, field)?;
    String::from_utf8(buf).map_err(|_| DampError::Format(format!("{field} is not UTF-8")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_bits() {
        let mut c = Container::new("test", json!({"dim": 3}));
        c.push("a", Matrix::from_vec(1, 3, vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap());
        c.push("empty", Matrix::zeros(0, 4));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_usize("dim").unwrap(), 3);
    }

    #[test]
    fn rejects_version_mismatch() {
        let mut bytes = Container::new("x", json!({})).to_bytes();
        bytes[8] = 99;
        let err = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let mut c = Container::new("x", json!({}));
        c.push("m", Matrix::filled(2, 2, 1.0));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
