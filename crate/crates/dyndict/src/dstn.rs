//! DSTN tensor snapshots: magic `DSTN`, a version byte, a rank byte,
//! `rank` little-endian u64 extents and the row-major values as
//! little-endian f64.

use std::path::Path;

use dyndict_core::numerics::Tensor;

use crate::error::{FormatError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"DSTN";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 6;

/// Encoded size of a tensor with the given shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    HEADER_LEN + 8 * shape.len() + 8 * shape.iter().product::<usize>()
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape()));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(FormatError::malformed(0, "missing DSTN magic"));
    }
    let version = *bytes.get(4).ok_or_else(|| FormatError::malformed(4, "unexpected end of file, expected version"))?;
    if version != VERSION {
        return Err(FormatError::Unsupported { offset: 4, message: format!("version {version}, expected {VERSION}") });
    }
    let rank = *bytes.get(5).ok_or_else(|| FormatError::malformed(5, "unexpected end of file, expected rank"))? as usize;
    let mut pos = HEADER_LEN;
    let mut shape = Vec::with_capacity(rank);
    for axis in 0..rank {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| FormatError::malformed(bytes.len(), format!("truncated extent of axis {axis}")))?;
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if d == 0 {
            return Err(FormatError::malformed(pos, format!("axis {axis} has zero extent")));
        }
        shape.push(usize::try_from(d).map_err(|_| FormatError::malformed(pos, "extent exceeds the address space"))?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| FormatError::malformed(HEADER_LEN, "element count overflows"))?;
    let have = bytes.len() - pos;
    if have < 8 * numel {
        return Err(FormatError::malformed(
            bytes.len(),
            format!("payload truncated: expected {} bytes, found {have}", 8 * numel),
        ));
    }
    if have > 8 * numel {
        return Err(FormatError::malformed(pos + 8 * numel, format!("{} trailing bytes", have - 8 * numel)));
    }
    let data = bytes[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data).map_err(|e| FormatError::malformed(HEADER_LEN, e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fsutil::write_atomic(path, &encode(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fsutil::read(path)?;
    decode(&bytes).map_err(|e| e.at(path))
}
