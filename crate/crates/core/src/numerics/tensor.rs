//! Dense row-major tensors of `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// A dense, row-major array of reals.
///
/// Extents are always positive; `shape.iter().product() == data.len()`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "extents must be positive: {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when the tensor is viewed as a matrix.
    ///
    /// Rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += scale * other`, shapes must agree.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// `out[m x n] (+)= a[m x k] * b[k x n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += a[m x n] * b[k x n]^T`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 || a.rank() != 2 || b.rank() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::matrix(2, 1, vec![2.0, -3.0]).unwrap();
        let y = matmul(&Tensor::identity(2), &x).unwrap();
        assert_eq!(y.data(), &[2.0, -3.0]);
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let expect = matmul(&a, &b.transpose()).unwrap();
        let mut out = vec![0.0; 8];
        gemm_bt(a.data(), b.data(), &mut out, 2, 3, 4);
        assert_eq!(out, expect.data());

        let c = Tensor::matrix(2, 4, (0..8).map(|v| v as f64 - 3.0).collect()).unwrap();
        let expect = matmul(&a.transpose(), &c).unwrap();
        let mut out = vec![0.0; 12];
        gemm_at(a.data(), c.data(), &mut out, 2, 3, 4);
        assert_eq!(out, expect.data());
    }
}
