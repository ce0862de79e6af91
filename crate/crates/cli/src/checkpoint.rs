//! Binary checkpoint format.
//!
//! Layout (all integers little-endian): magic `DSN1`, u32 tensor count,
//! then per tensor a u32 rank, `rank` u64 extents, and the row-major `f64`
//! payload. Values round-trip bit for bit; tensors follow the network's
//! canonical parameter order (backbone, companion heads, output head).

use std::fs;
use std::path::Path;

use dsn_core::Tensor;

use crate::error::CliError;

const MAGIC: &[u8; 4] = b"DSN1";

pub const FILE_NAME: &str = "checkpoint.dsn1";

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<(), CliError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

fn bad(path: &Path, what: &str) -> CliError {
    CliError::Data(format!("{}: {what}", path.display()))
}

pub fn load(path: &Path) -> Result<Vec<Tensor>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CliError> {
        let end = at.checked_add(n).ok_or_else(|| bad(path, "length overflow"))?;
        if end > bytes.len() {
            return Err(bad(path, "truncated checkpoint"));
        }
        let s = &bytes[at..end];
        at = end;
        Ok(s)
    };

    if take(4)? != MAGIC {
        return Err(bad(path, "not a DSN1 checkpoint"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        if rank == 0 || rank > 4 {
            return Err(bad(path, "tensor rank outside 1..=4"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let e = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let e = usize::try_from(e).map_err(|_| bad(path, "extent overflows usize"))?;
            len = len
                .checked_mul(e)
                .ok_or_else(|| bad(path, "element count overflows"))?;
            shape.push(e);
        }
        let payload = take(len * 8)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_values(&shape, values).map_err(|e| bad(path, &e.to_string()))?;
        tensors.push(t);
    }
    if at != bytes.len() {
        return Err(bad(path, "trailing bytes after the last tensor"));
    }
    Ok(tensors)
}
