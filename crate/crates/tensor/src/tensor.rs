use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// Dense row-major tensor. Image-like data uses NCHW layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of a contiguous tensor.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Numpy-style broadcast of two shapes, right-aligned.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self::new(shape, (0..numel(shape)).map(&mut f).collect())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
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

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let (_, ch, h, w) = self.dims4();
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let (_, ch, h, w) = self.dims4();
        self.data[((b * ch + c) * h + y) * w + x] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Self {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len().max(1) as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Expands size-1 axes to `shape` (same rank required).
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        assert_eq!(
            self.rank(),
            shape.len(),
            "broadcast_to {:?} -> {shape:?}: rank mismatch",
            self.shape
        );
        if self.shape == shape {
            return self.clone();
        }
        for (&s, &t) in self.shape.iter().zip(shape) {
            assert!(s == t || s == 1, "cannot broadcast {:?} to {shape:?}", self.shape);
        }
        let mut out = Vec::with_capacity(numel(shape));
        broadcast_rec(&self.data, &self.shape, shape, 0, 0, &mut out);
        Self::new(shape, out)
    }

    /// Sums over axes so that the result has `shape`; each target axis is
    /// either equal to the source axis or 1.
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        assert_eq!(
            self.rank(),
            shape.len(),
            "sum_to {:?} -> {shape:?}: rank mismatch",
            self.shape
        );
        if self.shape == shape {
            return self.clone();
        }
        for (&s, &t) in self.shape.iter().zip(shape) {
            assert!(s == t || t == 1, "cannot reduce {:?} to {shape:?}", self.shape);
        }
        let mut out = vec![T::zero(); numel(shape)];
        let out_strides = strides(shape);
        // Walk the source in order, one innermost row at a time; every output
        // element accumulates in source order, so results are reproducible
        // bit for bit.
        let rank = self.rank();
        if rank == 0 {
            return Self::new(shape, self.data.clone());
        }
        let last = rank - 1;
        let inner = self.shape[last];
        let keep_inner = shape[last] != 1;
        let mut idx = vec![0usize; last];
        if inner > 0 {
            for row in self.data.chunks(inner) {
                let base: usize = (0..last)
                    .filter(|&a| shape[a] != 1)
                    .map(|a| idx[a] * out_strides[a])
                    .sum();
                if keep_inner {
                    for (d, &v) in out[base..base + inner].iter_mut().zip(row) {
                        *d += v;
                    }
                } else {
                    let d = &mut out[base];
                    for &v in row {
                        *d += v;
                    }
                }
                for a in (0..last).rev() {
                    idx[a] += 1;
                    if idx[a] < self.shape[a] {
                        break;
                    }
                    idx[a] = 0;
                }
            }
        }
        Self::new(shape, out)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(axis < self.rank() && start + len <= self.shape[axis]);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(&shape, out)
    }

    /// Zero-pads `axis` to `total` entries, placing `self` at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Self {
        let len = self.shape[axis];
        assert!(start + len <= total);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut out = vec![T::zero(); numel(&shape)];
        for o in 0..outer {
            let src = &self.data[o * len * inner..(o + 1) * len * inner];
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(src);
        }
        Self::new(&shape, out)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0];
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            assert_eq!(p.rank(), first.rank());
            for a in 0..first.rank() {
                if a != axis {
                    assert_eq!(p.shape[a], first.shape[a], "concat shape mismatch on axis {a}");
                }
            }
            shape[axis] += p.shape[axis];
        }
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Self::new(&shape, out)
    }

    /// Matrix product of rank-2 tensors with optional transposition.
    pub fn matmul(&self, rhs: &Self, ta: bool, tb: bool) -> Self {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(rhs.rank(), 2, "matmul rhs must be rank 2");
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (rhs.shape[0], rhs.shape[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let a_strides = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let b_strides = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            a_strides,
            &rhs.data,
            b_strides,
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Self::new(&[m, n], out)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Self {
        let (b, c, h, w) = self.dims4();
        let mut out = vec![T::zero(); b * c * h * w * 4];
        let (h2, w2) = (2 * h, 2 * w);
        for p in 0..b * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Self::new(&[b, c, h2, w2], out)
    }

    /// Sum over non-overlapping 2x2 windows (adjoint of `upsample2x`).
    pub fn sum_pool2x(&self) -> Self {
        let (b, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2x needs even extents");
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for p in 0..b * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    let i = 2 * y * w + 2 * x;
                    dst[y * w2 + x] = src[i] + src[i + 1] + src[i + w] + src[i + w + 1];
                }
            }
        }
        Self::new(&[b, c, h2, w2], out)
    }
}

fn broadcast_rec<T: Copy>(
    src: &[T],
    src_shape: &[usize],
    dst_shape: &[usize],
    axis: usize,
    offset: usize,
    out: &mut Vec<T>,
) {
    let rank = src_shape.len();
    if axis == rank {
        out.push(src[offset]);
        return;
    }
    // Fast paths for the trailing block.
    if src_shape[axis..] == dst_shape[axis..] {
        let n = numel(&src_shape[axis..]);
        out.extend_from_slice(&src[offset..offset + n]);
        return;
    }
    if src_shape[axis..].iter().all(|&s| s == 1) {
        let n = numel(&dst_shape[axis..]);
        out.extend(std::iter::repeat_n(src[offset], n));
        return;
    }
    let inner = numel(&src_shape[axis + 1..]);
    for i in 0..dst_shape[axis] {
        let si = if src_shape[axis] == 1 { 0 } else { i };
        broadcast_rec(src, src_shape, dst_shape, axis + 1, offset + si * inner, out);
    }
}
