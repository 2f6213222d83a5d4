use std::fs;
use std::path::Path;

use super::{EnvError, Result};

const MAGIC: &[u8; 4] = b"GMAT";
const VERSION: u32 = 1;

/// Serializes `data` with shape `dims` into the `GMAT` layout: magic, version,
/// ndim, dims, then the f32 payload, all little-endian. An empty `dims` list
/// denotes a scalar.
pub fn encode_tensor(data: &[f32], dims: &[usize]) -> Result<Vec<u8>> {
    let count = element_count(dims)?;
    if count != data.len() {
        return Err(EnvError::Format(format!("dims {dims:?} describe {count} values, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| EnvError::Format(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut cursor = Reader { bytes, pos: 0 };
    if cursor.take(4)? != MAGIC {
        return Err(EnvError::Format("bad magic".into()));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(EnvError::Format(format!("unsupported version {version}")));
    }
    let ndim = cursor.u32()? as usize;
    if ndim > (bytes.len() - cursor.pos) / 4 {
        return Err(EnvError::Format("truncated dims".into()));
    }
    let dims: Vec<usize> = (0..ndim).map(|_| cursor.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let count = element_count(&dims)?;
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| EnvError::Format("dims overflow".into()))?;
    if bytes.len() - cursor.pos != payload {
        return Err(EnvError::Format(format!(
            "payload has {} bytes, dims require {payload}",
            bytes.len() - cursor.pos
        )));
    }
    let data = cursor.take(payload)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((data, dims))
}

pub fn write_tensor(path: impl AsRef<Path>, data: &[f32], dims: &[usize]) -> Result<()> {
    fs::write(path, encode_tensor(data, dims)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<f32>, Vec<usize>)> {
    decode_tensor(&fs::read(path)?)
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| EnvError::Format("dims overflow".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(EnvError::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
