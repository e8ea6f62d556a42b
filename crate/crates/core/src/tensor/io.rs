//! `DMT1` tensor files: the magic bytes `DMT1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the `f32` payload in row-major
//! order, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const DMT_MAGIC: &[u8; 4] = b"DMT1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "DMT",
        msg: msg.into(),
    }
}

pub fn write_dmt(t: &Tensor<f32>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(DMT_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads shape + payload that follow the magic bytes.
pub(crate) fn read_shape_and_data(r: &mut impl Read, max_rank: u32) -> Result<Tensor<f32>> {
    let truncated = |e: std::io::Error| format_err(format!("truncated header: {e}"));
    let rank = read_u32(r).map_err(truncated)?;
    if rank > max_rank {
        return Err(format_err(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = read_u32(r).map_err(truncated)? as usize;
        if d == 0 {
            return Err(format_err("zero extent"));
        }
        shape.push(d);
    }
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n = n.filter(|&n| n < (1 << 31)).ok_or_else(|| format_err("payload too large"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| format_err(format!("payload shorter than {n} floats")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_dmt(mut r: impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err("missing magic"))?;
    if &magic != DMT_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let t = read_shape_and_data(&mut r, 16)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| format_err(e.to_string()))? != 0 {
        return Err(format_err("trailing bytes after payload"));
    }
    Ok(t)
}

pub fn save_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dmt(t, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dmt(BufReader::new(file))
}
