//! Binary tensor container.
//!
//! ```text
//! "AFTN" | version u32 | rank u32 | dims u32 * rank | f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"AFTN";
pub const TENSOR_VERSION: u32 = 1;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn load_err(e: std::io::Error) -> Error {
    Error::Load(format!("truncated or unreadable tensor data: {e}"))
}

/// Rank, dims and payload without the magic/version prefix.
pub fn write_tensor_record<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let io = |e| Error::Load(format!("write failed: {e}"));
    write_u32(w, t.rank() as u32).map_err(io)?;
    for &d in t.shape() {
        write_u32(w, d as u32).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data().iter() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

/// Reads a record written by [`write_tensor_record`] as a constant tensor.
pub fn read_tensor_record<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let rank = read_u32(r).map_err(load_err)? as usize;
    if rank > 16 {
        return Err(Error::Load(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(load_err)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(load_err)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(data, &shape)
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)
        .and_then(|_| write_u32(w, TENSOR_VERSION))
        .map_err(|e| Error::Load(format!("write failed: {e}")))?;
    write_tensor_record(w, t)
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(load_err)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Load(format!("bad magic {magic:?}, expected AFTN")));
    }
    let version = read_u32(r).map_err(load_err)?;
    if version != TENSOR_VERSION {
        return Err(Error::Load(format!("unsupported tensor version {version}")));
    }
    read_tensor_record(r)
}
