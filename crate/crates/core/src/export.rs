//! Single-modality labeled vectors (`MREX`), for external visualization.
//!
//! ```text
//! "MREX" | version: u32 | N: u32 | d: u32 | C: u32
//! N records: f32 * d | label: u32
//! ```

use std::path::Path;

use crate::binio::{put_f32, put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MREX_MAGIC: &[u8; 4] = b"MREX";
pub const MREX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedEmbeddings {
    pub dim: usize,
    pub classes: usize,
    pub rows: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ExportedEmbeddings {
    pub fn from_tensor(vectors: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let (n, dim) = vectors.dims2()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(ExportedEmbeddings {
            dim,
            classes,
            rows: vectors.data().iter().map(|&v| v as f32).collect(),
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.rows.iter().map(|&v| v as f64).collect())
            .expect("validated on construction")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.len() * 4 * (self.dim + 1));
        out.extend_from_slice(MREX_MAGIC);
        put_u32(&mut out, MREX_VERSION);
        put_u32(&mut out, to_u32(self.len(), "N")?);
        put_u32(&mut out, to_u32(self.dim, "d")?);
        put_u32(&mut out, to_u32(self.classes, "C")?);
        for (i, &y) in self.labels.iter().enumerate() {
            for &v in &self.rows[i * self.dim..(i + 1) * self.dim] {
                put_f32(&mut out, v);
            }
            put_u32(&mut out, y as u32);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "export file");
        r.magic(MREX_MAGIC)?;
        let version = r.u32()?;
        if version != MREX_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let expected = n
            .checked_mul(4 * (dim + 1))
            .ok_or_else(|| Error::DimMismatch("export header overflows".into()))?;
        if r.remaining() < expected {
            return Err(Error::Truncated(format!(
                "export file: {n} records need {expected} bytes, {} present",
                r.remaining()
            )));
        }
        if r.remaining() > expected {
            return Err(Error::DimMismatch(format!(
                "export file has {} trailing bytes",
                r.remaining() - expected
            )));
        }
        let mut rows = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..dim {
                rows.push(r.f32()?);
            }
            let y = r.u32()? as usize;
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            labels.push(y);
        }
        Ok(ExportedEmbeddings {
            dim,
            classes,
            rows,
            labels,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}
