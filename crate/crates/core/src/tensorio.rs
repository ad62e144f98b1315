//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "CSTN"
//! version  u32      1
//! dtype    u32      1 = f32, 2 = f64
//! ndim     u32
//! dims     ndim x u64
//! payload  product(dims) elements, row-major, little-endian
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSTN";
const VERSION: u32 = 1;

/// Element type used on disk. Values are always `f64` in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Appends the encoded tensor to `out`.
pub fn encode(tensor: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Decodes one tensor from the front of `input`, advancing it.
pub fn decode(input: &mut &[u8]) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let code = read_u32(input)?;
    let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
    let ndim = read_u32(input)? as usize;
    if ndim > 8 {
        return Err(format!("implausible rank {ndim}"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(input)? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("shape overflows")?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let bytes = count.checked_mul(width).ok_or("payload overflows")?;
    if input.len() < bytes {
        return Err(format!("payload truncated: need {bytes} bytes, have {}", input.len()));
    }
    let (payload, rest) = input.split_at(bytes);
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    *input = rest;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let mut buf = Vec::new();
    encode(tensor, dtype, &mut buf);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut slice = buf.as_slice();
    let t = decode(&mut slice).map_err(|m| Error::format(path, m))?;
    if !slice.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", slice.len())));
    }
    Ok(t)
}

pub(crate) fn read_exact(input: &mut &[u8], out: &mut [u8]) -> std::result::Result<(), String> {
    if input.len() < out.len() {
        return Err("unexpected end of data".into());
    }
    let (head, rest) = input.split_at(out.len());
    out.copy_from_slice(head);
    *input = rest;
    Ok(())
}

pub(crate) fn read_u32(input: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(input: &mut &[u8]) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Tensor::new([2, 3], vec![1.0, -2.5, 1e-300, f64::MAX, 0.1, -0.0]).unwrap();
        let mut buf = Vec::new();
        encode(&t, DType::F64, &mut buf);
        let back = decode(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn f32_round_trip_rounds_once() {
        let t = Tensor::vector(vec![0.1, 3.0]);
        let mut buf = Vec::new();
        encode(&t, DType::F32, &mut buf);
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 8 + 2 * 4);
        let back = decode(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data(), &[f64::from(0.1f32), 3.0]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut buf = Vec::new();
        encode(&Tensor::zeros([4]), DType::F32, &mut buf);
        assert!(decode(&mut &buf[..buf.len() - 1]).unwrap_err().contains("truncated"));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode(&mut bad.as_slice()).unwrap_err().contains("magic"));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(decode(&mut bad.as_slice()).unwrap_err().contains("dtype"));
    }

    #[test]
    fn file_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.bin");
        let err = read_tensor(&path).unwrap_err().to_string();
        assert!(err.contains("missing.bin"), "{err}");
        write_tensor(&path, &Tensor::full([2, 2], 1.5), DType::F32).unwrap();
        assert_eq!(read_tensor(&path).unwrap().data(), &[1.5; 4]);
    }
}
