//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//! `magic "PFCK" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count`
//! then per entry `u32 name_len | name | u8 dtype (1 = f64) | u32 rank |
//! u32 extents | f64 payload`.

use std::io::Write;
use std::path::Path;

use super::params::ParamSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON metadata (model config, step, config hash).
    pub meta: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(at, format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let at = r.pos;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| r.fail(at, "metadata is not UTF-8"))?
            .to_string();
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.fail(at, "name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(r.fail(at, format!("unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.pos;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| r.fail(at, "payload too large"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.fail(at, e.to_string()))?;
            params.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        Ok(Self { meta, params })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            detail: detail.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use crate::rng::seeded;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        let mut rng = seeded(4);
        ps.add("a.w", &[3, 2], Init::Normal(1.0), &mut rng);
        ps.add("a.b", &[2], Init::Normal(1.0), &mut rng);
        Checkpoint {
            meta: r#"{"step":7}"#.into(),
            params: ps,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0 && (offset as usize) < bytes.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
