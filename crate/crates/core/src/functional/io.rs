//! Tensor files.
//!
//! Little-endian: `b"DSCT"`, rank `u8` (always 3), dims `u32` in
//! channel/height/width order, dtype `u8` (`0` real64, `1` q16), frac bits
//! `i8` for q16 only, then the `[channel][row][col]` payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fixedpoint::format::{read_exact, read_i16s, read_u32, write_i16s};
use crate::tensor::{QParams, QTensor, Tensor, TensorShape};

pub const TENSOR_MAGIC: [u8; 4] = *b"DSCT";
const REAL64: u8 = 0;
const Q16: u8 = 1;

/// Contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    Real(Tensor),
    Fixed(QTensor),
}

impl TensorFile {
    pub fn shape(&self) -> TensorShape {
        match self {
            TensorFile::Real(t) => t.shape,
            TensorFile::Fixed(q) => q.shape,
        }
    }
}

fn header(w: &mut impl Write, shape: TensorShape, dtype: u8) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[3])?;
    for d in [shape.channels, shape.height, shape.width] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[dtype])?;
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    header(w, t.shape, REAL64)?;
    let mut bytes = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_qtensor(w: &mut impl Write, q: &QTensor) -> Result<()> {
    header(w, q.shape, Q16)?;
    w.write_all(&[q.params.frac_bits() as i8 as u8])?;
    write_i16s(w, &q.data)
}

pub fn read_tensor(r: &mut impl Read) -> Result<TensorFile> {
    if read_exact::<4>(r)? != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor file".into()));
    }
    let [rank] = read_exact::<1>(r)?;
    if rank != 3 {
        return Err(Error::Format(format!("tensor rank {rank}, expected 3")));
    }
    let (c, h, w) = (read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize);
    let shape = TensorShape::new(h, w, c).map_err(|e| Error::Format(e.to_string()))?;
    let [dtype] = read_exact::<1>(r)?;
    let t = match dtype {
        REAL64 => {
            let mut bytes = vec![0u8; shape.len() * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            TensorFile::Real(Tensor::from_vec(shape, data)?)
        }
        Q16 => {
            let [e] = read_exact::<1>(r)?;
            let params = QParams::new(e as i8 as i32).map_err(|e| Error::Format(e.to_string()))?;
            TensorFile::Fixed(QTensor::from_vec(shape, read_i16s(r, shape.len())?, params)?)
        }
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}
