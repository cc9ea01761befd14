//! Small dense linear-algebra kernel.
//!
//! Everything accumulates in `f64`. Activations may be stored as `f32`
//! elsewhere, but sums, norms and similarities are always formed here.

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl std::ops::Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on 0
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `selfᵀ · other`, a `cols × other.cols` matrix.
    pub fn t_matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: other.rows,
            });
        }
        let mut out = RealMatrix::zeros(self.cols, other.cols);
        for (a, b) in self.row_iter().zip(other.row_iter()) {
            for (i, &ai) in a.iter().enumerate() {
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_inner(self, self).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two equal-length slices, clamped to `[-1, 1]`.
pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    for n in [nu, nv] {
        if n.is_nan() || n < ZERO_NORM {
            return Err(Error::ZeroNormInput { norm: n });
        }
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn cosine(u: &RealVector, v: &RealVector) -> Result<f64> {
    cosine_slices(u.as_slice(), v.as_slice())
}

/// Column means of `m`.
pub fn mean_pool(m: &RealMatrix) -> Result<RealVector> {
    if m.rows == 0 {
        return Err(Error::EmptyInput("mean_pool over zero rows"));
    }
    let mut acc = vec![0.0; m.cols];
    for r in m.row_iter() {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x;
        }
    }
    let n = m.rows as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(RealVector(acc))
}

/// Subtracts each column's mean so every column sums to zero.
pub fn center_rows(m: &RealMatrix) -> RealMatrix {
    if m.rows == 0 {
        return m.clone();
    }
    let means = mean_pool(m).expect("rows > 0");
    let mut out = m.clone();
    for r in out.data.chunks_exact_mut(m.cols.max(1)) {
        for (x, mu) in r.iter_mut().zip(means.as_slice()) {
            *x -= mu;
        }
    }
    out
}

/// `Σ_ij a_ij b_ij`. Panics on shape mismatch.
pub fn frobenius_inner(a: &RealMatrix, b: &RealMatrix) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "frobenius_inner shape mismatch");
    dot(&a.data, &b.data)
}
