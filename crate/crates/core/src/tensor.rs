//! Dense row-major `f64` tensors and the forward kernels used by the tape.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape around `axis` into (outer, dim, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[i, r.len()], &[0, cols]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new([rows.len(), cols], data)
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

    /// Size of the last axis (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            numel(&self.shape[..self.shape.len().saturating_sub(1)])
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.sum_squares())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.shape.len(),
            });
        }
        Ok(())
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, dim, inner) = axis_extents(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &self.data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (y, x) in dst.iter_mut().zip(src) {
                    *y += x;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, dim, inner) = axis_extents(&self.shape, axis);
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for d in 0..dim {
                    max = max.max(self.data[idx(d)]);
                }
                let mut total = 0.0;
                for d in 0..dim {
                    let e = libm::exp(self.data[idx(d)] - max);
                    out[idx(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[idx(d)] /= total;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.shape.len();
        if r < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: r });
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = numel(&self.shape[..r - 2]);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Tensor::new(shape, out)
    }

    /// Batched matrix product `(…×m×k) · (…×k×n)` with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for (bo, (ba, bb)) in plan.batch_offsets().enumerate() {
            let a = &self.data[ba * m * k..(ba + 1) * m * k];
            let b = &other.data[bb * k * n..(bb + 1) * k * n];
            let c = &mut out[bo * m * n..(bo + 1) * m * n];
            gemm_acc(a, b, c, m, k, n);
        }
        Tensor::new(plan.out_shape, out)
    }

    /// Rows of a tensor selected along axis 0.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::InvalidAxis { axis: 0, rank: 0 });
        }
        let n = self.shape[0];
        let inner = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        first.check_axis(axis)?;
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            if p.shape.len() != first.shape.len()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
            shape[axis] += p.shape[axis];
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        if start + len > self.shape[axis] {
            return Err(Error::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                len: self.shape[axis],
            });
        }
        let (outer, dim, inner) = axis_extents(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Copies of the same-shaped inputs stacked along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Permutes rows (axis 0): output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Tensor> {
        self.gather_rows(perm)
    }
}

/// `c += a · b` for row-major `m×k` and `k×n` blocks.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Batch bookkeeping for a broadcast matrix product.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    batch_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let dim_at = |s: &[usize], i: usize| {
            let off = rank - s.len();
            if i < off {
                1
            } else {
                s[i - off]
            }
        };
        let mut batch_shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let (x, y) = (dim_at(ab, i), dim_at(bb, i));
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape("matmul", a, b));
            }
            batch_shape.push(x.max(y));
        }
        // Strides in units of whole matrices; zero along broadcast axes.
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                let d = dim_at(s, i);
                st[i] = if d == 1 { 0 } else { acc };
                acc *= d;
            }
            st
        };
        let a_strides = strides(ab);
        let b_strides = strides(bb);
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            batch_shape,
            a_strides,
            b_strides,
        })
    }

    /// For each output batch (in order), the matching batch index of `a` and `b`.
    pub fn batch_offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total = numel(&self.batch_shape);
        (0..total).map(move |mut flat| {
            let (mut oa, mut ob) = (0, 0);
            for i in (0..self.batch_shape.len()).rev() {
                let idx = flat % self.batch_shape[i];
                flat /= self.batch_shape[i];
                oa += idx * self.a_strides[i];
                ob += idx * self.b_strides[i];
            }
            (oa, ob)
        })
    }
}

/// `rhs` must equal `lhs` in shape or be a suffix of it (broadcast over the
/// leading axes). Returns the repeat count of `rhs`.
pub(crate) fn suffix_repeats(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(Error::shape(op, lhs, rhs));
    }
    Ok(numel(&lhs[..lhs.len() - rhs.len()]))
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    suffix_repeats(&a.shape, &b.shape, op)?;
    let bl = b.data.len().max(1);
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % bl]))
        .collect();
    Tensor::new(a.shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let a = t(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::zeros([2, 2])).unwrap(), Tensor::zeros([2, 2]));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let err = Tensor::zeros([2, 3]).matmul(&Tensor::zeros([2, 3])).unwrap_err();
        assert_eq!(err, Error::shape("matmul", &[2, 3], &[2, 3]));
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let a = Tensor::new([2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t(&[&[1.0], &[1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::zeros([3]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(Tensor::new([1], vec![7.0]).unwrap().softmax(0).unwrap().data(), &[1.0]);
        let logs = Tensor::new([3], vec![0.0, libm::log(2.0), libm::log(3.0)]).unwrap();
        let s = logs.softmax(0).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[&[1.0, 5.0], &[1.0, 5.0]]);
        let s = x.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0], &[6.0]]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap(), a);
        assert_eq!(c.narrow(1, 2, 1).unwrap(), b);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new([2, 2], vec![1.0]),
            Err(Error::DataLength { .. })
        ));
    }
}
