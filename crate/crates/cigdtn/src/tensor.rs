//! Dense row-major tensors and the handful of linear-algebra kernels the
//! rest of the crate is built on.
//!
//! Reductions run in sequential row-major order so results are
//! bit-reproducible for a fixed seed. There is no broadcasting beyond the
//! explicit row-wise helpers; every other shape mismatch is a hard error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument(
                    "from_rows: ragged row lengths".into(),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Number of rows when viewed as a matrix (rank-2 only).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        let w = self.shape[1];
        self.data[r * w + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    /// Standard matrix product. Inner extents must agree.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose2 needs rank-2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, rhs: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_usize(self.numel().max(1))
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for &x in &self.data {
            if x.abs() > m {
                m = x.abs();
            }
        }
        m
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        self.check_finite("softmax_rows input")?;
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "softmax_rows needs rank-2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut denom = T::zero();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row.iter()) {
                *o = (x - m).exp();
                denom += *o;
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o / denom;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Row-wise layer normalization without a learned affine part.
    /// Uses the population variance so a two-element row maps to [-1, 1].
    pub fn layernorm_rows(&self, eps: T) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || self.shape[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "layernorm_rows needs rank-2 with >= 2 columns, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let cn = T::of_usize(c);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean / cn;
            let mut var = T::zero();
            for &x in row {
                var += (x - mean) * (x - mean);
            }
            var = var / cn;
            let inv = (var + eps).sqrt().recip();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row.iter()) {
                *o = (x - mean) * inv;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// GELU (tanh approximation) and its exact derivative, shared by forward
/// kernels and adjoint code.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(0.7978845608028654); // sqrt(2/pi)
    let a = T::of(0.044715);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(0.7978845608028654);
    let a = T::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * sech2 * du
}
