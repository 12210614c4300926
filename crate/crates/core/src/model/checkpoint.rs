//! Binary checkpoint format.
//!
//! ```text
//! "NMTWP1\0"
//! repeated per tensor (sorted by name):
//!     u32 name length, UTF-8 name, u32 rank, u32 dims…, f32 values
//! u64 tensor count
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::params::{Model, ParamStore};
use crate::error::{NmtError, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 7] = b"NMTWP1\0";

pub fn encode_params<T: Real>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            let v = v.to_f32().expect("finite parameter");
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NmtError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NmtError::Checkpoint("bad magic bytes".into()));
    }
    let body_end = bytes.len() - 8;
    let count = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: MAGIC.len(),
    };
    let mut store = ParamStore::new();
    let mut seen = 0u64;
    while r.pos < body_end {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NmtError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect();
        if store.contains(&name) {
            return Err(NmtError::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.insert(
            name,
            Tensor::new(shape, data).map_err(|e| NmtError::Checkpoint(e.to_string()))?,
        );
        seen += 1;
    }
    if seen != count {
        return Err(NmtError::Checkpoint(format!(
            "trailer says {count} tensors, found {seen}"
        )));
    }
    Ok(store)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_params(&model.params)).map_err(|e| NmtError::file(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| NmtError::file(path, e))?;
    Model::from_params(decode_params(&bytes)?)
}
