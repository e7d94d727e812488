//! `FLT1` tensor files: magic, `u32` rank, `u32` extents, then the values
//! as little-endian `f64`, row-major. All integers little-endian.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FLT1";

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::Contract("refusing to write non-finite values".into()));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn fail(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| fail(at, "truncated header"))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let rank = u32_at(bytes, 4)? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    let mut pos = 8;
    for _ in 0..rank {
        let e = u32_at(bytes, pos)? as usize;
        if e == 0 {
            return Err(fail(pos, "zero extent"));
        }
        shape.push(e);
        pos += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fail(8, "extents overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: need {n} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(fail(pos + n, "trailing bytes"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(pos, e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..4], b"FLT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(-0.0);
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            decode_tensor(b"FLT2\0\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_tensor(b"FLT1\x01\0"),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut b = encode_tensor(&Tensor::zeros(&[3])).unwrap();
        b.pop();
        assert!(matches!(decode_tensor(&b), Err(Error::Format { .. })));
        assert!(encode_tensor(&Tensor::full(&[1], f64::NAN)).is_err());
    }
}
