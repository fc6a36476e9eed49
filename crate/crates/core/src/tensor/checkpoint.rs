//! Binary parameter container.
//!
//! Layout (all integers unsigned 64-bit little-endian):
//! magic `LADCKPT1`, entry count, then per entry: name length, UTF-8 name,
//! rank, extents, raw little-endian `f64` values.

use std::io::{Read, Write};

use super::{ParamSet, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LADCKPT1";

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ParamSet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u64(w, params.len() as u64)?;
    for (name, t) in params.iter() {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.rank() as u64)?;
        for &e in t.shape() {
            put_u64(w, e as u64)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "unknown magic/version {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = get_u64(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = get_u64(r)? as usize;
        if name_len > 1 << 16 {
            return Err(TensorError::Checkpoint(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::Checkpoint(format!("name is not UTF-8: {e}")))?;
        let rank = get_u64(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(TensorError::Checkpoint(format!("bad rank {rank} for `{name}`")));
        }
        let shape = (0..rank)
            .map(|_| get_u64(r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.contains(&name) {
            return Err(TensorError::Checkpoint(format!("duplicate entry `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}
