//! Dense row-major tensors and the handful of deterministic kernels the
//! attention blocks are built from.
//!
//! Feature maps are channel-major: a `C x H x W` map flattens spatial
//! position `(x, y)` to `i = y * W + x`, and the same buffer doubles as a
//! `C x N` matrix with `N = H * W`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Row-sum tolerance for a softmax computed at this precision.
    pub fn row_sum_tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-6,
            Precision::Double => 1e-12,
        }
    }
}

/// Element type of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape2D {
    pub height: usize,
    pub width: usize,
}

impl Shape2D {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape {
                dims: vec![height, width],
                reason: "spatial extents must be at least 1".into(),
            });
        }
        Ok(Self { height, width })
    }

    /// Number of spatial positions, `H * W`.
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    /// Flat index of pixel `(x, y)`.
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

pub const MAX_RANK: usize = 4;

/// Contiguous row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        validate_dims(dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                dims: dims.to_vec(),
                reason: format!("holds {} values, expected {expected}", data.len()),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        validate_dims(dims).expect("valid dims");
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Tensor filled with `N(0, std^2)` samples.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        validate_dims(dims).expect("valid dims");
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Build a rank-2 tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<T> = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), cols, "ragged rows");
                r.iter().copied()
            })
            .collect();
        Self::new(&[rows.len(), cols], data).expect("valid rows")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.dims,
                rhs: dims.to_vec(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Element `(r, c)` of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.dims[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.dims[1];
        self.data[r * cols + c] = v;
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.dims[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.matrix_dims("transpose")?;
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::new(&[cols, rows], out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Extents of a rank-2 tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                dims: self.dims.clone(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((self.dims[0], self.dims[1]))
    }

    pub(crate) fn check_same(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Dimension {
                op,
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(op, other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Shape {
            dims: dims.to_vec(),
            reason: format!("rank must be 1..={MAX_RANK}"),
        });
    }
    if dims.contains(&0) {
        return Err(Error::Shape {
            dims: dims.to_vec(),
            reason: "all extents must be at least 1".into(),
        });
    }
    Ok(())
}

/// Matrix product `a (M x P) * b (P x Q)`.
///
/// Every output element is accumulated from zero in ascending `p`, the same
/// order as the textbook triple loop, so results are bit-reproducible.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = a.matrix_dims("matmul")?;
    let (p2, q) = b.matrix_dims("matmul")?;
    if p != p2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    let mut out = vec![T::zero(); m * q];
    for (row, out_row) in out.chunks_mut(q).enumerate() {
        let a_row = &a.data[row * p..(row + 1) * p];
        for (k, &a_val) in a_row.iter().enumerate() {
            let b_row = &b.data[k * q..(k + 1) * q];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_val * b_val;
            }
        }
    }
    Tensor::new(&[m, q], out)
}

/// Numerically stable softmax of each row of a matrix.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = m.matrix_dims("softmax_rows")?;
    if let Some(index) = m.first_non_finite() {
        return Err(Error::NumericInput {
            op: "softmax_rows",
            index,
        });
    }
    let mut out = m.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(&m.dims, out)
}

/// Softmax of one row, subtracting the row maximum first. Inputs must be
/// finite. The normaliser is accumulated in f64 so single-precision rows
/// still sum to one within a few ulps.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.as_f64();
    }
    for v in row.iter_mut() {
        *v = T::from_f64(v.as_f64() / total);
    }
}

/// Reverse-mode softmax: given probabilities `p` and upstream gradient `g`,
/// overwrite `g` with `p_j (g_j - sum_t p_t g_t)`.
pub fn softmax_backward_in_place<T: Scalar>(p: &[T], g: &mut [T]) {
    let dot = p
        .iter()
        .zip(g.iter())
        .fold(T::zero(), |acc, (&pv, &gv)| acc + pv * gv);
    for (gv, &pv) in g.iter_mut().zip(p) {
        *gv = pv * (*gv - dot);
    }
}

/// 1x1 convolution over a flattened feature map: `w (Cout x Cin) * x (Cin x N)`
/// plus a per-output-channel bias.
pub fn conv1x1<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let x2 = as_matrix(x)?;
    let (cout, cin) = w.matrix_dims("conv1x1")?;
    if cin != x2.dims[0] {
        return Err(Error::Dimension {
            op: "conv1x1",
            lhs: w.dims.clone(),
            rhs: x.dims.clone(),
        });
    }
    let mut out = matmul(w, &x2)?;
    if let Some(b) = bias {
        if b.dims != [cout] {
            return Err(Error::Dimension {
                op: "conv1x1 bias",
                lhs: vec![cout],
                rhs: b.dims.clone(),
            });
        }
        let n = out.dims[1];
        for (row, &bv) in out.data.chunks_mut(n).zip(&b.data) {
            for v in row {
                *v = *v + bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of a 1x1 convolution: returns `(d_x, d_w, d_bias)` given the
/// forward input `x (Cin x N)`, weights and upstream gradient `(Cout x N)`.
pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let x2 = as_matrix(x)?;
    let grad_w = matmul(grad_out, &x2.transpose()?)?;
    if grad_w.dims != w.dims {
        return Err(Error::Dimension {
            op: "conv1x1_backward",
            lhs: w.dims.clone(),
            rhs: grad_w.dims,
        });
    }
    let grad_x = matmul(&w.transpose()?, grad_out)?;
    let (cout, n) = grad_out.matrix_dims("conv1x1_backward")?;
    let grad_b = (0..cout)
        .map(|c| grad_out.data[c * n..(c + 1) * n].iter().copied().sum())
        .collect();
    Ok((grad_x, grad_w, Tensor::new(&[cout], grad_b)?))
}

/// View a `C x H x W` (or `C x N`) tensor as a `C x N` matrix.
pub fn as_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        2 => Ok(x.clone()),
        3 => x.clone().reshape(&[x.dims[0], x.dims[1] * x.dims[2]]),
        _ => Err(Error::Shape {
            dims: x.dims.clone(),
            reason: "expected a C x N or C x H x W feature map".into(),
        }),
    }
}
