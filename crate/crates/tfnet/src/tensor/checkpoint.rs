//! Flat parameter archive: "TFNV1" magic, entry count, then per entry
//! name, shape, and raw little-endian f64 data. Entries are written in
//! sorted name order so the round trip is byte-exact.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::ParamStore;

const MAGIC: &[u8; 5] = b"TFNV1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected TFNV1")]
    BadMagic,
    #[error("corrupt archive: {0}")]
    Corrupt(String),
}

pub fn save_params<W: Write>(w: &mut W, params: &ParamStore) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_params<R: Read>(r: &mut R) -> Result<ParamStore, CheckpointError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Corrupt(format!("non-utf8 name: {e}")))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        store.insert(&name, &shape, values);
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
