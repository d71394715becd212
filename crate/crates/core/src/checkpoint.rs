//! SPKC named-tensor container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "SPKC"
//! version  u32      1
//! count    u32      number of tensors
//! count × {
//!   name_len u32, name UTF-8 bytes,
//!   rank     u32, dims u64 × rank,
//!   values   f64 × product(dims)
//! }
//! ```
//!
//! Values are stored by bit pattern, so round trips are exact (NaN payloads
//! included).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPKC";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.rank() + 8 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected SPKC"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(64));
        let mut n: u64 = 1;
        for _ in 0..rank {
            let at = r.pos as u64;
            let d = r.u64("dimension")?;
            n = n.checked_mul(d).ok_or_else(|| Error::format(at, "tensor size overflows"))?;
            shape.push(d as usize);
        }
        let at = r.pos as u64;
        let bytes = n.checked_mul(8).filter(|&b| b <= (buf.len() - r.pos) as u64).ok_or_else(|| {
            Error::format(
                at,
                format!("truncated values of '{name}': need {} values, {} bytes remain", n, buf.len() - r.pos),
            )
        })?;
        let raw = r.take(bytes as usize, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}
