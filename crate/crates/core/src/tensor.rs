//! Dense row-major tensors and the handful of kernels the runtime needs.
//!
//! Every reduction runs in a fixed index order, so results are
//! bit-reproducible regardless of how many threads call into this module.
//! Shapes are always explicit; nothing broadcasts.

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point scalar usable as tensor storage.
///
/// `f32` is the storage and compute type everywhere; `f64` is used only to
/// evaluate finite-difference losses where f32 cancellation error would
/// swamp the signal.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn erf(self) -> Self;
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values finite; public kernels re-check on output.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2("column_block")?;
        if start + width > c || width == 0 {
            return Err(Error::Shape(format!(
                "column block {start}..{} outside {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Self {
            shape: vec![r, width],
            data,
        })
    }

    /// Rows `start..start + count` of a matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        let (r, c) = self.dims2("row_block")?;
        if start + count > r || count == 0 {
            return Err(Error::Shape(format!(
                "row block {start}..{} outside {r} rows",
                start + count
            )));
        }
        Ok(Self {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        let out = Self {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("add")?;
        Ok(out)
    }

    pub fn scale(&self, alpha: T) -> Result<Self> {
        let out = Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * alpha).collect(),
        };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("hcat of nothing".into()))?;
        let r = first.dims2("hcat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("hcat")?;
            if pr != r {
                return Err(Error::Shape(format!("hcat row mismatch {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self {
            shape: vec![r, total],
            data,
        })
    }
}

/// `c[i,j] = sum_t a[i,t] * b[t,j]`, accumulated for t = 0..k-1 in order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {m}x{k} times {k2}x{n}"
        )));
    }
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a.data[i * k + t];
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    let out = Tensor {
        shape: vec![m, n],
        data: c,
    };
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Vector-matrix product `v · b` for a vector of length k and a k×n matrix.
pub fn vecmat<T: Real>(v: &[T], b: &Tensor<T>) -> Result<Vec<T>> {
    let (k, n) = b.dims2("vecmat")?;
    if v.len() != k {
        return Err(Error::Shape(format!(
            "vecmat: vector of {} against {k}x{n}",
            v.len()
        )));
    }
    let mut out = vec![T::zero(); n];
    for (t, &av) in v.iter().enumerate() {
        for (o, &bv) in out.iter_mut().zip(&b.data[t * n..(t + 1) * n]) {
            *o = *o + av * bv;
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vecmat".into()));
    }
    Ok(out)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, _) = x.dims2("softmax_rows")?;
    x.ensure_finite("softmax_rows input")?;
    let mut out = x.clone();
    for i in 0..r {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Softmax of a square score matrix restricted to the causal prefix of each
/// row; entries above the diagonal come out as exact zeros.
pub fn softmax_causal<T: Real>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = scores.dims2("softmax_causal")?;
    if r != c {
        return Err(Error::Shape(format!("causal softmax needs a square matrix, got {r}x{c}")));
    }
    scores.ensure_finite("softmax_causal input")?;
    let mut out = scores.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        softmax_in_place(&mut row[..=i]);
        for v in &mut row[i + 1..] {
            *v = T::zero();
        }
    }
    Ok(out)
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    let n = x.len();
    if gain.len() != n || bias.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "layer_norm of {n} values with gain {} and bias {}",
            gain.len(),
            bias.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Shape("layer_norm eps must be positive".into()));
    }
    let nf = T::lit(n as f64);
    let mut sum = T::zero();
    for &v in x {
        sum = sum + v;
    }
    let mean = sum / nf;
    let mut sq = T::zero();
    for &v in x {
        let d = v - mean;
        sq = sq + d * d;
    }
    let inv = T::one() / (sq / nf + eps).sqrt();
    let out: Vec<T> = x
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer_norm".into()));
    }
    Ok(out)
}

/// Applies [`layer_norm`] to every row of a matrix.
pub fn layer_norm_rows<T: Real>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    let (r, _) = x.dims2("layer_norm_rows")?;
    let mut out = x.clone();
    for i in 0..r {
        let normed = layer_norm(x.row(i), gain, bias, eps)?;
        out.row_mut(i).copy_from_slice(&normed);
    }
    Ok(out)
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

/// Exact-erf GELU, elementwise.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    };
    out.ensure_finite("gelu")?;
    Ok(out)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("relu input")?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
