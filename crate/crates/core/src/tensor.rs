//! Dense row-major tensors over `f64`.
//!
//! Shapes are checked at the boundaries; internal kernels use plain index
//! arithmetic. Every value is expected to stay finite — NaN/Inf is an error
//! state detected by [`Tensor::check_finite`].

use crate::error::{CoreError, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Row vector of length `n`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// 2-D tensor from rows.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as 2-D (`[n, d]`); a 1-D tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => self.shape[0],
        }
    }

    /// Row width when viewed as 2-D.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.cols();
        &mut self.data[i * d..(i + 1) * d]
    }

    /// Stack a slice of equal-width rows into an `[n, d]` tensor.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::Shape("from_rows on empty slice".into()));
        }
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(CoreError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), d], data)
    }

    /// Vertical concatenation of two `[n, d]` tensors.
    pub fn vcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.cols() {
            return Err(CoreError::Shape(format!(
                "vcat width mismatch: {} vs {}",
                a.cols(),
                b.cols()
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
    }

    /// Rows `[lo, hi)` as a new tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        let d = self.cols();
        Tensor {
            shape: vec![hi - lo, d],
            data: self.data[lo * d..hi * d].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Fingerprint of the exact bit pattern, for trajectory comparisons.
    pub fn bits_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &v in &self.data {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// `c = a * b` for `a: [n, k]`, `b: [k, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(CoreError::Shape(format!("matmul: [{n},{k}] x [{k2},{m}]")));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        s += d * d;
    }
    s
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
