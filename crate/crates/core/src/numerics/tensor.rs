use super::Real;
use crate::error::{Result, TigrError};

/// Dense row-major tensor.
///
/// Most operations treat a tensor as a matrix of `rows() × cols()`, where
/// `cols()` is the last dimension and `rows()` the product of the others.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(TigrError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "empty shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Builds an `n × d` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TigrError::Data("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TigrError::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(self, other)
    }
}

/// Which operand of a product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    None,
    Lhs,
    Rhs,
}

/// `C = op(A)·op(B)` with 64-bit accumulation, rounded to `T`.
pub(crate) fn gemm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans: Trans) -> Result<Tensor<T>> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, ka, n) = match trans {
        Trans::None => (ar, ac, br, bc),
        Trans::Lhs => (ac, ar, br, bc),
        Trans::Rhs => (ar, ac, bc, br),
    };
    if k != ka {
        return Err(TigrError::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    // Row/column strides of op(A) and op(B) over the row-major buffers.
    let (rsa, csa) = match trans {
        Trans::Lhs => (1, ac as isize),
        _ => (ac as isize, 1),
    };
    let (rsb, csb) = match trans {
        Trans::Rhs => (1, bc as isize),
        _ => (bc as isize, 1),
    };
    let a64 = to_f64_buf(&a.data);
    let b64 = to_f64_buf(&b.data);
    let mut c = vec![0.0f64; m * n];
    // SAFETY: the strides above address exactly the `ar*ac` and `br*bc`
    // elements of the source buffers, and `c` holds `m*n` elements with
    // row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            rsa,
            csa,
            b64.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: c.into_iter().map(T::from_f64).collect(),
    })
}

fn to_f64_buf<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Matrix product `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm(a, b, Trans::None)
}

/// Row-wise softmax with max subtraction.
///
/// `allowed`, when given, has one flag per column; disallowed columns get
/// probability zero. A row with no allowed column is all zeros.
pub fn softmax_rows<T: Real>(a: &Tensor<T>, allowed: Option<&[bool]>) -> Tensor<T> {
    let n = a.cols();
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = &mut out.data[r * n..(r + 1) * n];
        let ok = |j: usize| allowed.is_none_or(|m| m[j]);
        let max = (0..n)
            .filter(|&j| ok(j))
            .map(|j| row[j].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut exps = vec![0.0f64; n];
        let mut sum = 0.0f64;
        for j in 0..n {
            if ok(j) {
                exps[j] = (row[j].as_f64() - max).exp();
                sum += exps[j];
            }
        }
        for j in 0..n {
            row[j] = T::from_f64(exps[j] / sum);
        }
    }
    out
}

pub const RMS_EPS: f64 = 1e-6;

/// Root-mean-square normalisation over the last axis, scaled by `gain`.
pub fn rmsnorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.numel() != d {
        return Err(TigrError::Dimension {
            op: "rmsnorm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = &mut out.data[r * d..(r + 1) * d];
        let inv = inv_rms(row);
        for (v, g) in row.iter_mut().zip(&gain.data) {
            *v = T::from_f64(v.as_f64() * inv * g.as_f64());
        }
    }
    Ok(out)
}

pub(crate) fn inv_rms<T: Real>(row: &[T]) -> f64 {
    let ms = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}
