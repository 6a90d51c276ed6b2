//! Dense array files: `b"PNSA"`, version `u16`, dtype `u8` (1 = float32,
//! 2 = float64), ndim `u8`, then `ndim` little-endian `u64` extents, then the
//! row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PNSA";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

pub fn write_array(w: &mut impl Write, a: &Array2<f64>, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8, 2])?;
    w.write_all(&(a.nrows() as u64).to_le_bytes())?;
    w.write_all(&(a.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(a.len() * 8);
    for &v in a.iter() {
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_array(r: &mut impl Read) -> Result<Array2<f64>> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("not an array file".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported array version {version}")));
    }
    let (dtype, ndim) = (head[6], head[7]);
    if ndim != 2 {
        return Err(Error::Format(format!("expected a 2-d array, found {ndim}-d")));
    }
    let mut dims = [0usize; 2];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *d = u64::from_le_bytes(b) as usize;
    }
    let len = dims[0] * dims[1];
    let data: Vec<f64> = match dtype {
        1 => {
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
        }
        2 => {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    Ok(Array2::from_shape_vec((dims[0], dims[1]), data).expect("extent matches payload"))
}

pub fn save(path: &Path, a: &Array2<f64>, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_array(&mut w, a, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Array2<f64>> {
    read_array(&mut BufReader::new(File::open(path)?))
}
