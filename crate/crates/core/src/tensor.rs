//! Dense row-major tensors and the raw kernels the autodiff tape is built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
///
/// Models are stored and trained in `f32`. The same graph code can be
/// instantiated with `f64`, which is what finite-difference gradient checks
/// run on.
pub trait Float:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;

    /// `C = A B` for strided `A: [m,k]`, `B: [k,n]` into a fresh row-major `C`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize)) -> Vec<Self>;
}

impl Float for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize)) -> Vec<Self> {
        let mut c = vec![0.0; m * n];
        check_extent(a, m, k, rsa, csa);
        check_extent(b, k, n, rsb, csb);
        // SAFETY: extents of a and b checked above; c is exactly m*n row-major.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
        c
    }
}

impl Float for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (isize, isize), b: &[Self], (rsb, csb): (isize, isize)) -> Vec<Self> {
        let mut c = vec![0.0; m * n];
        check_extent(a, m, k, rsa, csa);
        check_extent(b, k, n, rsb, csb);
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
        c
    }
}

fn check_extent<T>(buf: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    let last = (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (rows == 0 || cols == 0 || (last as usize) < buf.len()), "gemm operand out of bounds");
}

/// A dense n-dimensional array.
///
/// `grad` is only populated for parameters that take part in training; the
/// tape itself keeps gradients separately and [`Tensor::accumulate_grad`]
/// copies them over.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug check for NaN/Inf.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Split `shape` around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// Kernels. All matrices are row-major slices.

/// `[m,k] x [k,n] -> [m,n]`
pub(crate) fn matmul_kernel<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1))
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub(crate) fn matmul_nt_kernel<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize))
}

/// `[m,k]^T x [m,n] -> [k,n]`
pub(crate) fn matmul_tn_kernel<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    T::gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1))
}

/// Numerically stable softmax along `axis`, with the denominator accumulated
/// in `f64`.
pub fn softmax_values<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("softmax axis {axis} out of range for shape {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| src[base + j * inner]).fold(T::neg_infinity(), T::max);
            let mut denom = 0f64;
            for j in 0..len {
                let e = (src[base + j * inner] - max).as_f64().exp();
                out[base + j * inner] = T::of_f64(e);
                denom += e;
            }
            for j in 0..len {
                let idx = base + j * inner;
                out[idx] = T::of_f64(out[idx].as_f64() / denom);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Row-wise log-sum-exp of a `[rows, cols]` buffer, in `f64`.
pub(crate) fn log_sum_exp_row<T: Float>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let s: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    max + s.ln()
}
