//! Binary PPM (P6, maxval 255) for stimulus and reconstruction images.
//! Images are `[3, H, W]` tensors in [0, 1].

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use std::fs;
use std::path::Path;

pub fn encode<E: Element>(img: &Tensor<E>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dim {
            op: "ppm_encode",
            lhs: s.to_vec(),
            rhs: vec![3, 0, 0],
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = img.data();
    for p in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + p].to_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode<E: Element>(bytes: &[u8], origin: &str) -> Result<Tensor<E>> {
    let fail = |msg: &str| Error::Integrity(format!("{origin}: {msg}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    // P6 header: three whitespace-separated fields after the magic, with
    // `#` comments allowed.
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P6" {
        return Err(fail("not a P6 ppm"));
    }
    let parse = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("bad header field"))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(fail("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let plane = h * w;
    if bytes.len() < pos + 3 * plane {
        return Err(fail("truncated pixel data"));
    }
    let mut data = vec![E::ZERO; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = E::from_f64(bytes[pos + 3 * p + c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

pub fn write<E: Element>(path: impl AsRef<Path>, img: &Tensor<E>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
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
    fn round_trip_within_quantization() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 * 0.37) % 1.0).collect();
        let img = Tensor::from_vec(vec![3, 4, 5], data).unwrap();
        let back: Tensor<f32> = decode(&encode(&img).unwrap(), "mem").unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn quantized_values_are_stable() {
        // once quantized, encode/decode is a fixed point
        let data: Vec<f32> = (0..3 * 2 * 2).map(|i| (i as f32 * 19.0) % 256.0 / 255.0).collect();
        let img = Tensor::from_vec(vec![3, 2, 2], data).unwrap();
        let once: Tensor<f32> = decode(&encode(&img).unwrap(), "mem").unwrap();
        let twice: Tensor<f32> = decode(&encode(&once).unwrap(), "mem").unwrap();
        assert_eq!(once.data(), twice.data());
    }
}
