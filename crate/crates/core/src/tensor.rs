//! Binary tensor files.
//!
//! Layout: `b"COAR"`, `u8` rank (at most 4), `rank` little-endian `u32`
//! dims, `u8` dtype tag (0 = f32, 1 = f64, 2 = i32), then the payload in
//! row-major order, little-endian.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"COAR";
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::I32),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I32(ArrayD<i32>),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::F64(_) => DType::F64,
            Tensor::I32(_) => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::I32(a) => a.shape(),
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::DtypeMismatch {
                expected: "f64",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn into_f32(self) -> Result<ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(Error::DtypeMismatch {
                expected: "f32",
                found: other.dtype().name(),
            }),
        }
    }

    /// Bit-level equality (distinguishes `-0.0` from `0.0` and compares NaN payloads).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && match (self, other) {
                (Tensor::F32(a), Tensor::F32(b)) => {
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (Tensor::F64(a), Tensor::F64(b)) => {
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (Tensor::I32(a), Tensor::I32(b)) => a == b,
                _ => false,
            }
    }
}

impl From<ArrayD<f32>> for Tensor {
    fn from(a: ArrayD<f32>) -> Self {
        Tensor::F32(a)
    }
}

impl From<ArrayD<f64>> for Tensor {
    fn from(a: ArrayD<f64>) -> Self {
        Tensor::F64(a)
    }
}

impl From<ArrayD<i32>> for Tensor {
    fn from(a: ArrayD<i32>) -> Self {
        Tensor::I32(a)
    }
}

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() > MAX_RANK {
        return Err(Error::RankTooLarge(shape.len()));
    }
    let count = element_count(shape)?;
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + count * tensor.dtype().size());
    out.extend_from_slice(MAGIC);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(tensor.dtype() as u8);
    match tensor {
        Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::I32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let rank = cur.take(1)?[0] as usize;
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge(rank));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::DimOverflow(format!("dim {d}")))?);
    }
    let dtype = DType::from_tag(cur.take(1)?[0])?;
    let count = element_count(&shape)?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::DimOverflow(format!("{count} elements of {}", dtype.name())))?;
    let payload = cur.take(payload_len)?;
    if cur.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - cur.pos));
    }
    let dim = IxDyn(&shape);
    let tensor = match dtype {
        DType::F32 => Tensor::F32(from_chunks(dim, payload, |c| f32::from_le_bytes(c.try_into().unwrap()))),
        DType::F64 => Tensor::F64(from_chunks(dim, payload, |c| f64::from_le_bytes(c.try_into().unwrap()))),
        DType::I32 => Tensor::I32(from_chunks(dim, payload, |c| i32::from_le_bytes(c.try_into().unwrap()))),
    };
    Ok(tensor)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::DimOverflow(format!("{shape:?}")))
    })
}

fn from_chunks<T>(dim: IxDyn, payload: &[u8], f: impl Fn(&[u8]) -> T) -> ArrayD<T> {
    let size = std::mem::size_of::<T>();
    let data: Vec<T> = payload.chunks_exact(size).map(f).collect();
    ArrayD::from_shape_vec(dim, data).expect("payload length checked against shape")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, ArrayD};
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let t = Tensor::F64(ArrayD::zeros(IxDyn(&[2, 3])));
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert!(back.bits_eq(&t));
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::I32(Array::from_shape_vec(IxDyn(&[2]), vec![1, -2]).unwrap());
        let bytes = encode(&t).unwrap();
        let expected: Vec<u8> = [
            &b"COAR"[..],
            &[1],
            &2u32.to_le_bytes(),
            &[2],
            &1i32.to_le_bytes(),
            &(-2i32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode(&Tensor::F32(ArrayD::zeros(IxDyn(&[1])))).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { found }) if &found == b"XXXX"));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = encode(&Tensor::F64(ArrayD::zeros(IxDyn(&[4, 4])))).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
        assert!(matches!(decode(b"CO"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dim_overflow_is_reported() {
        let mut bytes = b"COAR".to_vec();
        bytes.push(4);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        bytes.push(1);
        assert!(matches!(decode(&bytes), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn rank_and_dtype_rules() {
        let big = Tensor::F32(ArrayD::zeros(IxDyn(&[1, 1, 1, 1, 1])));
        assert!(matches!(encode(&big), Err(Error::RankTooLarge(5))));
        let mut bytes = encode(&Tensor::F32(ArrayD::zeros(IxDyn(&[1])))).unwrap();
        bytes[9] = 7;
        assert!(matches!(decode(&bytes), Err(Error::UnknownDtype(7))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.coar");
        let t = Tensor::F32(Array::from_shape_fn(IxDyn(&[2, 3, 4, 5]), |d| {
            (d[0] * 60 + d[1] * 20 + d[2] * 5 + d[3]) as f32 * 0.37 - 3.0
        }));
        write_tensor(&path, &t).unwrap();
        assert!(read_tensor(&path).unwrap().bits_eq(&t));
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..5, 0..=4)
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(shape in arb_shape(), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add(i.wrapping_mul(1442695040888963407))))
                .collect();
            let t = Tensor::F64(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert!(back.bits_eq(&t));
        }

        #[test]
        fn f32_and_i32_round_trip(shape in arb_shape(), vals in prop::collection::vec(any::<i32>(), 0..700)) {
            let n: usize = shape.iter().product();
            prop_assume!(vals.len() >= n);
            let ints = ArrayD::from_shape_vec(IxDyn(&shape), vals[..n].to_vec()).unwrap();
            let floats = ints.mapv(|v| f32::from_bits(v as u32));
            for t in [Tensor::I32(ints), Tensor::F32(floats)] {
                let back = decode(&encode(&t).unwrap()).unwrap();
                prop_assert!(back.bits_eq(&t));
            }
        }
    }
}
