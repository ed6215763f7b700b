//! Binary adapter checkpoints.
//!
//! Layout (little endian): the 8-byte magic `CELORACK`, a `u32` format
//! version, a `u32` layer count, then for each layer the matrices `A`, `C`
//! and `B`, each written as `u64` rows, `u64` cols and row-major `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::training::LayerFactors;

const MAGIC: &[u8; 8] = b"CELORACK";
const VERSION: u32 = 1;

fn write_matrix(w: &mut impl Write, m: &Array2<f64>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_matrix(r: &mut impl Read) -> Result<Array2<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows.checked_mul(cols).filter(|&n| n <= 1 << 32).ok_or_else(|| bad("matrix too large"))?;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))
}

fn bad(msg: &str) -> Error {
    Error::InvalidParameter(format!("corrupt checkpoint: {msg}"))
}

pub fn write_checkpoint(path: &Path, layers: &[LayerFactors]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        write_matrix(&mut w, &l.a)?;
        write_matrix(&mut w, &l.c)?;
        write_matrix(&mut w, &l.b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<LayerFactors>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)?;
    (0..n)
        .map(|_| {
            Ok(LayerFactors {
                a: read_matrix(&mut r)?,
                c: read_matrix(&mut r)?,
                b: read_matrix(&mut r)?,
            })
        })
        .collect()
}
