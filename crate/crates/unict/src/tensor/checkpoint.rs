//! Versioned binary container for named tensors.
//!
//! Layout, all little-endian:
//!   magic "UNICTCKPT" | version u32 | count u32
//!   per tensor: name_len u16, UTF-8 name, dtype u8, rank u8,
//!               dims u64 x rank, raw row-major payload.
//!
//! Round-trips are bit-exact: payload bytes are the IEEE-754 encodings of
//! the stored values, untouched.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dtype, Result, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 9] = b"UNICTCKPT";
pub const VERSION: u32 = 1;

/// Tensor with its dtype erased, as stored in the container.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            Dtype::F32 => AnyTensor::F32(t.cast()),
            Dtype::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Reinterpret as `Tensor<T>`; `None` when the stored dtype differs.
    pub fn to_tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        match (self, T::DTYPE) {
            (AnyTensor::F32(t), Dtype::F32) => Some(t.cast()),
            (AnyTensor::F64(t), Dtype::F64) => Some(t.cast()),
            _ => None,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn write_checkpoint(path: &Path, items: &[(String, AnyTensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, tensor) in items {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(TensorError::Format(format!("tensor name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.dtype().tag()])?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(TensorError::Format(format!("rank too large for {name}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match tensor {
            AnyTensor::F32(t) => f32::write_slice(t.data(), &mut w)?,
            AnyTensor::F64(t) => f64::write_slice(t.data(), &mut w)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic, not a checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag)?;
        let dtype = Dtype::from_tag(tag[0])
            .ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", tag[0])))?;
        let rank = tag[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let tensor = match dtype {
            Dtype::F32 => AnyTensor::F32(Tensor::from_vec(f32::read_vec(&mut r, numel)?, &shape)?),
            Dtype::F64 => AnyTensor::F64(Tensor::from_vec(f64::read_vec(&mut r, numel)?, &shape)?),
        };
        items.push((name, tensor));
    }
    Ok(items)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_across_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.unictckpt");
        let a = Tensor::<f32>::from_vec(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.71], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![std::f64::consts::PI, -1e-300], &[2]).unwrap();
        let items = vec![
            ("enc.w".to_string(), AnyTensor::F32(a.clone())),
            ("dec.b".to_string(), AnyTensor::F64(b.clone())),
        ];
        write_checkpoint(&path, &items).unwrap();
        let read = read_checkpoint(&path).unwrap();
        assert_eq!(read.len(), 2);
        match &read[0].1 {
            AnyTensor::F32(t) => {
                let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                let orig: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits, orig);
                assert_eq!(t.shape(), &[2, 2]);
            }
            _ => panic!("dtype changed"),
        }
        match &read[1].1 {
            AnyTensor::F64(t) => {
                let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
                let orig: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits, orig);
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"NOTACKPT_plus_some_padding").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
