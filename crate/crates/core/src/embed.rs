//! Unit-norm embedding vectors, the similarity kernels shared by the losses,
//! the mining pool and retrieval, and the `VGEM` binary float block format.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-6;

/// An l2-normalized vector. Construction goes through [`l2_normalize`] or
/// [`Embedding::from_unit`], so every value of this type has unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Wraps a vector that is already unit norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized(n));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::DegenerateVector);
    }
    Ok(Embedding { values: v.iter().map(|x| x / n).collect() })
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    Ok(())
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dot(&a.values, &b.values))
}

pub fn sq_l2_dist(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Pulls a gradient taken with respect to `raw / |raw|` back to `raw`:
/// `(g - (g . e) e) / |raw|`.
pub fn normalize_backward(raw: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(raw);
    let proj: f64 = raw.iter().zip(grad_unit).map(|(r, g)| r * g).sum::<f64>() / n;
    raw.iter()
        .zip(grad_unit)
        .map(|(r, g)| (g - proj * r / n) / n)
        .collect()
}

const MAGIC: &[u8; 4] = b"VGEM";

/// Row-major block of `f32` values: the on-disk layout for embeddings, raw
/// features and parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FloatMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{dim} block",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    /// Builds a block from `f64` rows, which must all share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: r.len() });
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Ok(Self { rows: rows.len(), dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let count = u32::try_from(self.rows).map_err(|_| Error::BadFormat("too many rows".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::BadFormat("dimension too large".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadFormat(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        let mut bytes = vec![0u8; rows * dim * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { rows, dim, data })
    }
}
