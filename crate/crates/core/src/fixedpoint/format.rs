//! Binary weight tensors.
//!
//! Little-endian record: `b"DSQW"`, rank `u8`, `rank` dims as `u32`, frac bits
//! `i8`, element count `u32`, then the 16-bit two's-complement payload.
//! Kernels are rank 4 `[out][in][kh][kw]`, vectors rank 1 `[channel]`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Kernel, QKernel, QParams, QVector};

pub const WEIGHT_MAGIC: [u8; 4] = *b"DSQW";

pub(crate) fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

pub(crate) fn read_i16s(r: &mut impl Read, count: usize) -> Result<Vec<i16>> {
    let mut bytes = vec![0u8; count * 2];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub(crate) fn write_i16s(w: &mut impl Write, data: &[i16]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// One raw weight record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightRecord {
    pub dims: Vec<u32>,
    pub params: QParams,
    pub data: Vec<i16>,
}

pub fn write_record(w: &mut impl Write, dims: &[u32], params: QParams, data: &[i16]) -> Result<()> {
    let count: u64 = dims.iter().map(|&d| d as u64).product();
    if count != data.len() as u64 || dims.len() > u8::MAX as usize {
        return Err(Error::Format(format!(
            "dims {dims:?} do not describe {} values",
            data.len()
        )));
    }
    w.write_all(&WEIGHT_MAGIC)?;
    w.write_all(&[dims.len() as u8])?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&(params.frac_bits() as i8).to_le_bytes())?;
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    write_i16s(w, data)
}

pub fn read_record(r: &mut impl Read) -> Result<WeightRecord> {
    let magic: [u8; 4] = read_exact(r)?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::Format(format!("bad weight magic {magic:?}")));
    }
    let [rank] = read_exact::<1>(r)?;
    let dims = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let [frac] = read_exact::<1>(r)?;
    let params = QParams::new(i8::from_le_bytes([frac]) as i32).map_err(|e| Error::Format(e.to_string()))?;
    let count = read_u32(r)? as usize;
    let expected: u64 = dims.iter().map(|&d| d as u64).product();
    if expected != count as u64 {
        return Err(Error::Format(format!(
            "element count {count} disagrees with dims {dims:?}"
        )));
    }
    let data = read_i16s(r, count)?;
    Ok(WeightRecord { dims, params, data })
}

pub fn write_kernel(w: &mut impl Write, k: &QKernel) -> Result<()> {
    let kk = &k.kernel;
    let dims = [
        kk.out_channels as u32,
        kk.in_channels as u32,
        kk.size as u32,
        kk.size as u32,
    ];
    write_record(w, &dims, k.params, &kk.data)
}

pub fn read_kernel(r: &mut impl Read) -> Result<QKernel> {
    let rec = read_record(r)?;
    match rec.dims[..] {
        [o, i, kh, kw] if kh == kw => Ok(QKernel {
            kernel: Kernel::new(o as usize, i as usize, kh as usize, rec.data)?,
            params: rec.params,
        }),
        _ => Err(Error::Format(format!("kernel record has dims {:?}", rec.dims))),
    }
}

pub fn write_vector(w: &mut impl Write, v: &QVector) -> Result<()> {
    write_record(w, &[v.data.len() as u32], v.params, &v.data)
}

pub fn read_vector(r: &mut impl Read) -> Result<QVector> {
    let rec = read_record(r)?;
    if rec.dims.len() != 1 {
        return Err(Error::Format(format!("vector record has dims {:?}", rec.dims)));
    }
    Ok(QVector {
        data: rec.data,
        params: rec.params,
    })
}
