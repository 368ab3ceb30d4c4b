//! Portable tensor files.
//!
//! Layout: 16-byte magic (`PGRTENS1` followed by eight NUL bytes), `u32` rank,
//! `rank` × `u32` dimensions, then the row-major `f64` payload. Every integer
//! and float is little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 16] = *b"PGRTENS1\0\0\0\0\0\0\0\0";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * t.rank() + 8 * t.len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor; `origin` names the source in error messages.
pub fn read_tensor<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
    let bad = |d: &str| Error::format(origin, d.to_string());
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = read_u32(&mut r).map_err(|_| bad("truncated rank"))? as usize;
    if rank == 0 || rank > 8 {
        return Err(bad("unsupported rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r).map_err(|_| bad("truncated dims"))? as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_tensor(bytes.as_slice(), path)
}
