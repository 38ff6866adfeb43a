//! HDT1 tensor file format.
//!
//! Layout: magic `HDT1`, one dtype byte (0 = f32, 1 = f64), little-endian
//! u32 rank, rank × u32 extents, then the row-major payload in little-endian
//! scalars. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"HDT1";

pub fn encode<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + t.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.push(E::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes(&mut out);
    }
    out
}

pub fn decode<E: Element>(bytes: &[u8], origin: &str) -> Result<Tensor<E>> {
    let fail = |msg: &str| Error::Integrity(format!("{origin}: {msg}"));
    if bytes.len() < 9 || &bytes[0..4] != MAGIC {
        return Err(fail("missing HDT1 magic"));
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| fail("unknown dtype code"))?;
    if dtype != E::DTYPE {
        return Err(fail(&format!(
            "dtype mismatch: file is {dtype:?}, expected {:?}",
            E::DTYPE
        )));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = 9 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if bytes.len() != header + numel * width {
        return Err(fail(&format!(
            "payload length {} does not match shape {shape:?}",
            bytes.len() - header
        )));
    }
    let data: Vec<E> = bytes[header..]
        .chunks_exact(width)
        .map(|c| match dtype {
            Dtype::F32 => E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
            Dtype::F64 => E::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect();
    Tensor::from_vec(shape, data)
        .map_err(|_| fail("zero extent in shape"))
}

pub fn write<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_f32() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0.1, -0.2, 3.5e-8, 1.0, -0.0, 7.25])
            .unwrap();
        let back: Tensor<f32> = decode(&encode(&t), "mem").unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f64() {
        let t =
            Tensor::<f64>::from_vec(vec![4], vec![std::f64::consts::PI, -1.0, 0.0, 1e-300]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t), "mem").unwrap();
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dtype_mismatch_is_integrity_error() {
        let t = Tensor::<f32>::zeros(vec![2]);
        let err = decode::<f64>(&encode(&t), "mem").unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn truncation_is_detected() {
        let t = Tensor::<f32>::zeros(vec![4]);
        let mut bytes = encode(&t);
        bytes.pop();
        assert!(decode::<f32>(&bytes, "mem").is_err());
    }
}
