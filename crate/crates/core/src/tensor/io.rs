//! Little-endian tensor container: `"R2PT"`, `u8` rank, `u64` dims, `f64` payload.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"R2PT";

/// Refuse to allocate absurd buffers from a corrupt header.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("expected tensor magic R2PT, got {magic:?}")));
    }
    let rank = r.read_u8()? as usize;
    if rank == 0 {
        return Err(Error::Format("tensor rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = r.read_u64::<LittleEndian>()?;
        count = count.saturating_mul(d);
        shape.push(d as usize);
    }
    if count == 0 || count > MAX_ELEMENTS {
        return Err(Error::Format(format!("implausible tensor shape {shape:?}")));
    }
    let mut data = vec![0.0; count as usize];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Tensor::new(shape, data)
}
