//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "USVCKPT\0"
//! version    u32       FORMAT_VERSION
//! kind       u8        1 = dehaze GAN, 2 = detector
//! dtype      u8        1 = f32, 2 = f64
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (architecture, config echo, loss records)
//! n_arrays   u32
//! n_arrays x {
//!     name_len u16, name bytes,
//!     ndim u8, ndim x u32 dims,
//!     count u64, count values
//! }
//! checksum   u64       FNV-1a over every preceding byte
//! ```

use std::path::Path;

use usv_nn::{NamedArray, Scalar};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"USVCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Dehaze = 1,
    Detector = 2,
}

impl CheckpointKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Dehaze),
            2 => Ok(Self::Detector),
            _ => Err(Error::Checkpoint(format!("unknown checkpoint kind {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint<T> {
    pub kind: CheckpointKind,
    pub meta: String,
    pub arrays: Vec<NamedArray<T>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> RawCheckpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(T::DTYPE);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            if name.len() > u16::MAX as usize || a.shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("array `{}` cannot be encoded", a.name)));
            }
            if a.shape.iter().product::<usize>() != a.values.len() {
                return Err(Error::Checkpoint(format!("array `{}` shape does not match its values", a.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(a.values.len() as u64).to_le_bytes());
            for v in &a.values {
                v.write_le(&mut out);
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let kind = CheckpointKind::from_u8(r.u8()?)?;
        let dtype = r.u8()?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("stored dtype {dtype} does not match requested {}", T::DTYPE)));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count = r.u64()? as usize;
            if shape.iter().product::<usize>() != count {
                return Err(Error::Checkpoint(format!("array `{name}` shape does not match its count")));
            }
            let raw = r.take(count.checked_mul(T::BYTES).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let values = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            arrays.push(NamedArray { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { kind, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Arrays whose names start with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Vec<NamedArray<T>> {
        let p = format!("{prefix}.");
        self.arrays
            .iter()
            .filter_map(|a| {
                a.name.strip_prefix(&p).map(|n| NamedArray { name: n.to_string(), shape: a.shape.clone(), values: a.values.clone() })
            })
            .collect()
    }
}

/// Prefix every array name with `prefix.`.
pub fn prefixed<T: Clone>(prefix: &str, arrays: Vec<NamedArray<T>>) -> Vec<NamedArray<T>> {
    arrays
        .into_iter()
        .map(|a| NamedArray { name: format!("{prefix}.{}", a.name), ..a })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
