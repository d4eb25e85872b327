//! Little-endian dataset container:
//!
//! ```text
//! "FRDS1"
//! u32 num_sequences, u32 T, u32 N, u32 D, u32 C
//! repeated num_sequences times: u32 label, T*N*D f64 values
//! ```

use std::path::Path;

use super::{Dataset, RawSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"FRDS1";
const HEADER_LEN: usize = 5 + 5 * 4;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let per_seq = 4 + 8 * ds.steps * ds.channels * ds.signal_dim;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * per_seq);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.len(), ds.steps, ds.channels, ds.signal_dim, ds.classes] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.sequences {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in s.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..5] != DATASET_MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let [count, steps, channels, signal_dim, classes] =
        [0, 1, 2, 3, 4].map(|i| read_u32(bytes, 5 + 4 * i) as usize);
    if steps == 0 || channels == 0 || signal_dim == 0 || classes == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension in T={steps} N={channels} D={signal_dim} C={classes}"
        )));
    }

    let values_per_seq = steps * channels * signal_dim;
    let per_seq = 4 + 8 * values_per_seq;
    let payload = bytes.len() - HEADER_LEN;
    let expected = count * per_seq;
    if payload != expected {
        // A payload that splits evenly into `count` records of some other
        // whole number of values means the header's T/N/D disagree with it.
        let consistent_other = count > 0
            && payload % count == 0
            && (payload / count) >= 4
            && (payload / count - 4) % 8 == 0;
        return Err(if payload > expected || consistent_other {
            Error::DimensionMismatch(format!(
                "header declares {count} x (T={steps}, N={channels}, D={signal_dim}) \
                 = {expected} payload bytes, found {payload}"
            ))
        } else {
            Error::TruncatedPayload {
                expected,
                found: payload,
            }
        });
    }

    let mut sequences = Vec::with_capacity(count);
    let mut at = HEADER_LEN;
    for _ in 0..count {
        let label = read_u32(bytes, at) as usize;
        at += 4;
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
        let values: Vec<f64> = bytes[at..at + 8 * values_per_seq]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 8 * values_per_seq;
        sequences.push(RawSequence {
            values: Tensor::new(vec![steps, channels, signal_dim], values)?,
            label,
        });
    }
    Ok(Dataset {
        sequences,
        steps,
        channels,
        signal_dim,
        classes,
        seed: None,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
