//! Binary tensor files.
//!
//! ```text
//! "EBMF" | u32 version | u32 rank | u64 dims[rank] | f64 data[Π dims] | u32 CRC32
//! ```
//!
//! Integers and floats are little-endian; the CRC covers every preceding byte.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"EBMF";
pub const TENSOR_VERSION: u32 = 1;

/// Appends `u32 rank | u64 dims | f64 data` to `out`.
pub(crate) fn put_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
}

/// Cursor over a byte slice that reports truncation.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn tensor_body(&mut self) -> Result<Tensor> {
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Malformed(format!("rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64("dimension")?).map_err(|_| Error::Malformed("dimension overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Malformed("tensor size overflow".into()))?;
        let raw = self.take(count, "payload")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }
}

/// Checks the trailing CRC32 and returns the bytes it covers.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    Ok(body)
}

pub(crate) fn append_crc(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    put_tensor_body(&mut out, t);
    append_crc(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::BadMagic { expected: "EBMF" });
    }
    let version = r.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(Error::BadVersion(version));
    }
    let t = r.tensor_body()?;
    if bytes.len() < r.pos + 4 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    if bytes.len() > r.pos + 4 {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos - 4)));
    }
    verify_crc(bytes)?;
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}
