//! Binary tensor files.
//!
//! Layout: magic `SNLT`, a `u8` precision flag (0 = f32, 1 = f64), a `u8`
//! rank, `rank` little-endian `u32` extents, then the values in row-major
//! order, little-endian. Records are self-delimiting, so a parameter bundle
//! is simply several records written back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SNLT";

/// A tensor of either precision, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::Single(_) => Precision::Single,
            AnyTensor::Double(_) => Precision::Double,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::Single(t) => t.dims(),
            AnyTensor::Double(t) => t.dims(),
        }
    }

    /// Convert to the requested element type, casting if needed.
    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::Single(t) => t.cast(),
            AnyTensor::Double(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::Single(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::Double(t)
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(match T::PRECISION {
        Precision::Single => 0,
        Precision::Double => 1,
    });
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf);
    w.write_all(&buf)?;
    Ok(())
}

/// Decode one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = cursor + n;
        let slice = bytes
            .get(cursor..end)
            .ok_or_else(|| Error::Format(format!("truncated at byte {cursor}")))?;
        cursor = end;
        Ok(slice)
    };
    if take(4)? != MAGIC {
        return Err(Error::Format("missing SNLT magic".into()));
    }
    let precision = match take(1)?[0] {
        0 => Precision::Single,
        1 => Precision::Double,
        other => return Err(Error::Format(format!("unknown precision flag {other}"))),
    };
    let rank = take(1)?[0] as usize;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        dims.push(d as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("extents {dims:?} overflow")))?;
    let tensor = match precision {
        Precision::Single => AnyTensor::Single(read_values::<f32>(&dims, count, &mut take)?),
        Precision::Double => AnyTensor::Double(read_values::<f64>(&dims, count, &mut take)?),
    };
    Ok((tensor, cursor))
}

fn read_values<'a, T: Scalar>(
    dims: &[usize],
    count: usize,
    take: &mut impl FnMut(usize) -> Result<&'a [u8]>,
) -> Result<Tensor<T>> {
    let raw = take(count * T::BYTES)?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_tensor(&mut fs::File::open(path)?)
}

/// Write several tensors back to back.
pub fn save_bundle<T: Scalar>(path: impl AsRef<Path>, tensors: &[&Tensor<T>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        encode(t, &mut buf);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read every record in a bundle file.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<Vec<AnyTensor>> {
    let bytes = fs::read(path)?;
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let (t, used) = decode(&bytes[offset..])?;
        out.push(t);
        offset += used;
    }
    Ok(out)
}
