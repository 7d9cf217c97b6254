//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic    b"ATAL"
//! version  u32
//! records  repeated until EOF:
//!            name_len u32, name (UTF-8), rank u32, dims u64 * rank,
//!            payload f32 * prod(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ATAL";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(records: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TensorError::Format(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TensorError::Format("bad magic, expected ATAL".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| TensorError::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| TensorError::Format("payload too large".into()))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(dims, data)?));
    }
    Ok(records)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let records: Vec<_> = store.iter().map(|(_, n, t)| (n, t)).collect();
    fs::write(path, encode(&records))?;
    Ok(())
}

/// Loads a checkpoint into `store`, which must already have the matching layout.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let records = decode(&fs::read(path)?)?;
    store.assign_from(records.into_iter().map(|(n, t)| (n, t.cast())).collect())
}
