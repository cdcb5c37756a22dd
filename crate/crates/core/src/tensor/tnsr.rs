//! `TNSR` container: magic `TNSR`, version `0x01`, dtype `0x00` (f32), rank
//! byte, `rank` little-endian u32 extents, then the row-major little-endian
//! payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

pub fn write<W: Write>(out: &mut W, t: &Tensor<f32>) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::InvalidArgument(format!("rank {} too large", t.rank())))?;
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION, DTYPE_F32, rank])?;
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d}")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut v = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    write(&mut v, t).expect("writing to a Vec cannot fail");
    v
}

pub fn read<R: Read>(input: &mut R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 7];
    input.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad TNSR magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported TNSR version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported TNSR dtype {}", head[5])));
    }
    let rank = head[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(truncated)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("TNSR extents overflow".into()))?;
    let mut payload = vec![0u8; n * 4];
    input.read_exact(&mut payload).map_err(truncated)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor<f32>> {
    read(&mut bytes)
}

pub fn save(path: impl AsRef<std::path::Path>, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated TNSR record".into())
    } else {
        Error::Io(e)
    }
}
