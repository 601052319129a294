//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `RAADCKPT`, version `u32`, tensor count `u64`,
//! then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims `u64` each,
//! and the `f64` payload.

use std::path::{Path, PathBuf};

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"RAADCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 16 + n.len() + 8 * (t.rank() + t.numel())).sum();
    let mut out = Vec::with_capacity(20 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl Reader<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.to_path_buf(),
    };
    if r.take(8)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected RAADCKPT"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let raw_name = r.take(len)?.to_vec();
        let name = String::from_utf8(raw_name).map_err(|_| r.err("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| r.err("dimension product overflows"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err("payload too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(tensors))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
