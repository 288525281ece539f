//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain value type (shape + contiguous buffer). Differentiable
//! computation happens on a [`Graph`], which records every operation and
//! replays the record backwards in [`Graph::backward`].

mod element;
mod graph;
mod rearrange;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use rearrange::RearrangePlan;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: size {size} is not divisible by {factor}")]
    NotDivisible {
        op: &'static str,
        size: usize,
        factor: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("bad rearrange pattern `{pattern}`: {reason}")]
    Pattern { pattern: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::one();
        }
        t
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                E::from_f64(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal(0, std) truncated to two standard deviations by resampling.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break E::from_f64(z * std);
                }
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| E::from_f64(rng.random_range(lo..hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> E {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn reshape_in_place(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(TensorError::Invalid(format!(
                "permute: {} axes given for rank {rank}",
                axes.len()
            )));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(TensorError::Invalid(format!(
                    "permute: {axes:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let data = strided_gather(&self.data, &out_shape, &src_strides);
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> E {
        self.sum() / E::from_f64(self.numel() as f64)
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Matrix product with optional leading-batch broadcast. See [`Graph::matmul`].
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let spec = MatmulSpec::new(&self.shape, &other.shape)?;
        let mut out = vec![E::zero(); numel(&spec.out_shape)];
        spec.forward(&self.data, &other.data, &mut out);
        Self::from_vec(&spec.out_shape, out)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        if start + len > self.shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow: range {start}..{} exceeds axis {axis} of size {}",
                start + len,
                self.shape[axis]
            )));
        }
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::from_vec(&shape, data)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.rank(),
            });
        }
        for p in &parts[1..] {
            let same = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self::from_vec(&shape, data)
    }
}

/// `(outer, dim, inner)` sizes around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Gathers `src` into a contiguous buffer of `out_shape`, reading element
/// `idx` from `sum(idx[i] * src_strides[i])`.
pub(crate) fn strided_gather<E: Copy>(src: &[E], out_shape: &[usize], src_strides: &[usize]) -> Vec<E> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        }
        // advance odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Shape bookkeeping for `[.., m, k] x [.., k, n]` products.
#[derive(Debug, Clone)]
pub(crate) struct MatmulSpec {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulSpec {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let (a_batched, b_batched, lead) = match (a_lead.is_empty(), b_lead.is_empty()) {
            (true, true) => (false, false, vec![]),
            (false, true) => (true, false, a_lead.to_vec()),
            (true, false) => (false, true, b_lead.to_vec()),
            (false, false) if a_lead == b_lead => (true, true, a_lead.to_vec()),
            _ => return Err(mismatch()),
        };
        let batch = numel(&lead);
        let mut out_shape = lead;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch,
            a_batched,
            b_batched,
            out_shape,
        })
    }

    pub fn forward<E: Element>(&self, a: &[E], b: &[E], c: &mut [E]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.a_batched && !self.b_batched {
            // one tall product
            E::gemm(self.batch * m, k, n, a, k, 1, b, n, 1, c, n, 1, false);
            return;
        }
        for i in 0..self.batch {
            let ao = if self.a_batched { i * m * k } else { 0 };
            let bo = if self.b_batched { i * k * n } else { 0 };
            E::gemm(
                m,
                k,
                n,
                &a[ao..ao + m * k],
                k,
                1,
                &b[bo..bo + k * n],
                n,
                1,
                &mut c[i * m * n..(i + 1) * m * n],
                n,
                1,
                false,
            );
        }
    }

    /// Gradients of `c = a b` given `dc`; returns `(da, db)`.
    pub fn backward<E: Element>(
        &self,
        a: &[E],
        b: &[E],
        dc: &[E],
        need_a: bool,
        need_b: bool,
    ) -> (Option<Vec<E>>, Option<Vec<E>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let a_len = if self.a_batched { self.batch * m * k } else { m * k };
        let b_len = if self.b_batched { self.batch * k * n } else { k * n };
        let mut da = need_a.then(|| vec![E::zero(); a_len]);
        let mut db = need_b.then(|| vec![E::zero(); b_len]);
        if self.a_batched && !self.b_batched {
            let rows = self.batch * m;
            if let Some(da) = da.as_mut() {
                // da = dc b^T
                E::gemm(rows, n, k, dc, n, 1, b, 1, n, da, k, 1, false);
            }
            if let Some(db) = db.as_mut() {
                // db = a^T dc
                E::gemm(k, rows, n, a, 1, k, dc, n, 1, db, n, 1, false);
            }
            return (da, db);
        }
        for i in 0..self.batch {
            let ao = if self.a_batched { i * m * k } else { 0 };
            let bo = if self.b_batched { i * k * n } else { 0 };
            let dco = i * m * n;
            let dci = &dc[dco..dco + m * n];
            if let Some(da) = da.as_mut() {
                E::gemm(
                    m,
                    n,
                    k,
                    dci,
                    n,
                    1,
                    &b[bo..bo + k * n],
                    1,
                    n,
                    &mut da[ao..ao + m * k],
                    k,
                    1,
                    true,
                );
            }
            if let Some(db) = db.as_mut() {
                E::gemm(
                    k,
                    m,
                    n,
                    &a[ao..ao + m * k],
                    1,
                    k,
                    dci,
                    n,
                    1,
                    &mut db[bo..bo + k * n],
                    n,
                    1,
                    true,
                );
            }
        }
        (da, db)
    }
}
