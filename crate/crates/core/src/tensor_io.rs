//! Binary tensor files.
//!
//! A tensor record is the magic `PCFT`, the rank as one byte, each extent as
//! a little-endian `u32`, then the row-major payload as little-endian `f32`.
//! Embedding files hold exactly one record.
//!
//! Named collections (checkpoints, scaler files) use the magic `PCFC`, an
//! entry count as `u32`, then per entry a `u32` name length, the UTF-8 name
//! and one tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"PCFT";
pub const COLLECTION_MAGIC: &[u8; 4] = b"PCFC";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let [rank] = read_exact::<_, 1>(r)?;
    let rank = rank as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(read_exact(r)?) as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated tensor payload: {e}")))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f))
}

pub fn write_named<W: Write>(w: &mut W, entries: &[(String, Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(COLLECTION_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != COLLECTION_MAGIC {
        return Err(Error::Format(format!("bad collection magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated entry name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_named(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_named(&mut w, entries).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_named(&mut BufReader::new(f))
}
