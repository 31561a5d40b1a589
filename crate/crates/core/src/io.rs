//! Portable binary tensor container.
//!
//! Layout: magic `PTNS`, `u16` version, `u16` rank, one `u64` per
//! dimension, a `u8` element tag (0 = f32, 1 = f64, 2 = u8), then the
//! little-endian row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PTNS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::TensorFormat(msg.into())
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(format_err(format!("dims {dims:?} need {n} elements, got {}", data.len())));
        }
        if dims.len() > u16::MAX as usize {
            return Err(format_err("rank too large"));
        }
        Ok(TensorFile { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        TensorFile { dims: t.shape().to_vec(), data: TensorData::F64(t.to_vec()) }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.to_f64(), &self.dims)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(self.data.tag());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(format_err("truncated header"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let rank = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| format_err("dimension overflows usize"))?);
        }
        let tag = take(1)?[0];
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err("element count overflows"))?;
        let size = match tag {
            0 => 4,
            1 => 8,
            2 => 1,
            t => return Err(format_err(format!("unknown element tag {t}"))),
        };
        let payload = cur;
        if Some(payload.len()) != n.checked_mul(size) {
            return Err(format_err(format!("payload has {} bytes, expected {} x {size}", payload.len(), n)));
        }
        let data = match tag {
            0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::U8(payload.to_vec()),
        };
        Ok(TensorFile { dims, data })
    }
}

pub fn write_tensor_file(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    fs::write(path, file.to_bytes())?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = TensorFile::new(vec![2], TensorData::U8(vec![7, 9])).unwrap();
        let b = f.to_bytes();
        assert_eq!(&b[..4], b"PTNS");
        assert_eq!(&b[4..8], &[1, 0, 1, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..], &[2, 7, 9]);
    }

    #[test]
    fn rejects_corruption() {
        let f = TensorFile::new(vec![2, 2], TensorData::F32(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = f.to_bytes();
        assert!(TensorFile::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(TensorFile::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[24] = 9;
        assert!(TensorFile::from_bytes(&bad).is_err());
        assert!(TensorFile::new(vec![3], TensorData::F64(vec![0.0])).is_err());
    }

    #[test]
    fn scalar_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ptns");
        let f = TensorFile::from_tensor(&Tensor::scalar(-0.0));
        write_tensor_file(&p, &f).unwrap();
        let g = read_tensor_file(&p).unwrap();
        assert_eq!(g.dims, Vec::<usize>::new());
        assert_eq!(g.to_f64()[0].to_bits(), (-0.0f64).to_bits());
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0usize..5, 0..=4)
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in dims_strategy(), seed in any::<u64>(), tag in 0u8..3) {
            let n: usize = dims.iter().product();
            let bits = |i: usize| seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407));
            let data = match tag {
                0 => TensorData::F32((0..n).map(|i| f32::from_bits(bits(i) as u32)).collect()),
                1 => TensorData::F64((0..n).map(|i| f64::from_bits(bits(i))).collect()),
                _ => TensorData::U8((0..n).map(|i| bits(i) as u8).collect()),
            };
            let f = TensorFile::new(dims, data).unwrap();
            let g = TensorFile::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(f.to_bytes(), g.to_bytes());
            prop_assert_eq!(&f.dims, &g.dims);
        }
    }
}
