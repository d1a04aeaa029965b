//! Named-tensor checkpoints (`MNCK`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MNCK" | version: u32
//! repeated until end of file:
//!   name_len: u16 | name: UTF-8 | rank: u32 | dims: u32 * rank | payload: f64 * prod(dims)
//! ```

use std::path::Path;

use crate::binio::{put_f64, put_u16, put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MNCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("tensor name too long: {} bytes", name.len())))?;
            put_u16(&mut out, name_len);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, to_u32(t.rank(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
            for &v in t.data() {
                put_f64(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut ckpt = Checkpoint::new();
        while !r.is_empty() {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(name_len)?)
                .map_err(|_| Error::invalid("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::DimMismatch(format!("tensor {name:?} shape overflows")))?;
            if count.saturating_mul(8) > r.remaining() {
                return Err(Error::Truncated(format!(
                    "checkpoint: tensor {name:?} needs {count} values"
                )));
            }
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ckpt.push(name, Tensor::new(shape, data)?);
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("enc.w0", Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap());
        c.push("tau", Tensor::scalar(0.07));
        c.push("empty", Tensor::zeros(&[0, 4]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in c.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let mut bytes = sample().to_bytes().unwrap();
        let short = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(Checkpoint::from_bytes(&short), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"MN"), Err(Error::Truncated(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn missing_tensor() {
        assert!(matches!(sample().get("nope"), Err(Error::MissingTensor(_))));
    }
}
