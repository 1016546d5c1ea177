//! Single-file binary container for named f64 tensors plus UTF-8 metadata.
//!
//! Layout (all integers little-endian):
//! `b"ICLCT"`, `u32` version, `u32` metadata count, then per entry
//! `u32 len, key, u32 len, value`; `u32` tensor count, then per tensor
//! `u32 len, name, u32 rank, rank × u64 dims, numel × f64`.
//! Entries are written in sorted key order so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 5] = b"ICLCT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Container {
            path: PathBuf::new(),
            message: format!("missing tensor {name}"),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes).map_err(|message| Error::Container {
            path: PathBuf::new(),
            message,
        })
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(MAGIC.len())? != MAGIC {
            return Err("bad magic".into());
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut out = Self::new();
        for _ in 0..c.u32()? {
            let k = c.string()?;
            let v = c.string()?;
            out.metadata.insert(k, v);
        }
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let rank = c.u32()? as usize;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = c.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            out.tensors.insert(name, t);
        }
        if c.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - c.pos));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Container { message, .. } => Error::Container {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set_meta("phase", "1");
        c.set_meta("note", "ünïcode");
        c.insert("w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        c.insert("s", Tensor::scalar(0.25));
        c
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let bytes = sample().to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor("w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.meta("note"), Some("ünïcode"));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
