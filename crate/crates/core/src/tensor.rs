//! Dense row-major tensors plus the few matrix kernels the layers need.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)).unwrap())
            .collect();
        Self { shape: shape.to_vec(), data }
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

    /// (N, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of sample `n` along the leading axis.
    pub fn item(&self, n: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// Channel concatenation of two NCHW tensors with equal N, H, W.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert!(n == nb && h == hb && w == wb, "concat mismatch {:?} vs {:?}", a.shape, b.shape);
        let mut out = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            out.extend_from_slice(a.item(i));
            out.extend_from_slice(b.item(i));
        }
        Self { shape: vec![n, ca + cb, h, w], data: out }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let (n, c, h, w) = self.dims4();
        assert!(first <= c);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * first * plane);
        let mut b = Vec::with_capacity(n * (c - first) * plane);
        for i in 0..n {
            let it = self.item(i);
            a.extend_from_slice(&it[..first * plane]);
            b.extend_from_slice(&it[first * plane..]);
        }
        (
            Self { shape: vec![n, first, h, w], data: a },
            Self { shape: vec![n, c - first, h, w], data: b },
        )
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty());
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner);
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self { shape, data }
    }

    /// (N, C, H, W) -> (N, C·f², H/f, W/f); channel `c·f² + dy·f + dx` holds
    /// offset (dy, dx) of each f×f cell. A pure permutation.
    pub fn space_to_depth(&self, f: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(f >= 1 && h % f == 0 && w % f == 0, "{:?} not divisible by {f}", self.shape);
        let (ho, wo) = (h / f, w / f);
        let mut out = Self::zeros(&[n, c * f * f, ho, wo]);
        for i in 0..n {
            let src = self.item(i);
            let dst = out.item_mut(i);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = ch * f * f + (y % f) * f + x % f;
                        dst[(oc * ho + y / f) * wo + x / f] = src[(ch * h + y) * w + x];
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor::space_to_depth`].
    pub fn depth_to_space(&self, f: usize) -> Self {
        let (n, cf, ho, wo) = self.dims4();
        assert!(f >= 1 && cf % (f * f) == 0);
        let (c, h, w) = (cf / (f * f), ho * f, wo * f);
        let mut out = Self::zeros(&[n, c, h, w]);
        for i in 0..n {
            let src = self.item(i);
            let dst = out.item_mut(i);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = ch * f * f + (y % f) * f + x % f;
                        dst[(ch * h + y) * w + x] = src[(oc * ho + y / f) * wo + x / f];
                    }
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `trans_a` the slice `a` holds a `k x m` row-major matrix, likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; strides describe in-bounds row-major layouts.
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}
