//! Little-endian name-to-tensor container, sharing the dataset file's
//! conventions:
//!
//! ```text
//! "FRPM1"
//! u32 count
//! repeated count times: u32 name_len, name bytes (UTF-8), u32 rank,
//!                       rank x u32 dims, prod(dims) f64 values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const PARAMS_MAGIC: &[u8; 5] = b"FRPM1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = PARAMS_MAGIC.to_vec();
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::TruncatedPayload {
                expected: self.at.saturating_add(n),
                found: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 9 || &bytes[..5] != PARAMS_MAGIC {
        return Err(Error::MalformedHeader("not a parameter checkpoint".into()));
    }
    let mut r = Reader { bytes, at: 5 };
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedHeader("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::invalid("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::MalformedHeader(format!("duplicate parameter `{name}`")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - r.at
        )));
    }
    Ok(params)
}

pub fn save_params(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_params(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
