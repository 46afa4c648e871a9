//! Little-endian binary tensor records: `b"TNSR"`, `u32` rank, `rank × u32`
//! dims, then the `f32` payload. Files may hold several records back to back.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    encode_into(t, &mut out);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TensorFormat {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes every record in `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::TensorFormat {
                offset: start,
                reason: "bad magic, expected TNSR".into(),
            });
        }
        let rank = cur.u32("rank")? as usize;
        if rank == 0 {
            return Err(Error::TensorFormat {
                offset: start + 4,
                reason: "rank must be positive".into(),
            });
        }
        let dims_at = cur.pos;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        if shape.contains(&0) {
            return Err(Error::TensorFormat {
                offset: dims_at,
                reason: format!("zero dimension in {shape:?}"),
            });
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::TensorFormat {
                offset: dims_at,
                reason: format!("shape {shape:?} overflows"),
            })?;
        let payload = cur.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut all = decode_all(bytes)?;
    if all.len() != 1 {
        return Err(Error::TensorFormat {
            offset: 0,
            reason: format!("expected one record, found {}", all.len()),
        });
    }
    Ok(all.pop().unwrap())
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
