//! Dense row-major tensors and the raw kernels the tape is built on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order.
///
/// A shape of `[]` denotes a scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of extent {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: T) {
        let off = self.offset(index);
        self.data[off] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::dim("reshape", &[&self.shape, shape]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::lit(self.len() as f64)
    }

    /// Converts element type; used to move between the generic core and f64 plumbing.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Axis permutation, `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let out_shape = permuted_shape(&self.shape, axes)?;
        let data = permute_data(&self.data, &self.shape, axes);
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::dim("transpose", &[&self.shape]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Plain (untracked) matrix product with the same shape rules as the tape op.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.forward(&self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: plan.out_shape,
            data: out,
        })
    }
}

pub(crate) fn permuted_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::dim("permute", &[shape, axes]));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::dim("permute", &[shape, axes]));
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

pub(crate) fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the input for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::default(); data.len()];
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = src[last];
    let mut o = 0;
    loop {
        let mut p = off;
        for slot in &mut out[o..o + inner] {
            *slot = data[p];
            p += inner_stride;
        }
        o += inner;
        // advance odometer over all axes except the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Resolves a possibly negative axis.
pub(crate) fn resolve_axis(op: &'static str, axis: isize, shape: &[usize]) -> Result<usize> {
    let nd = shape.len() as isize;
    let a = if axis < 0 { axis + nd } else { axis };
    if a < 0 || a >= nd {
        return Err(Error::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(a as usize)
}

/// `(outer, len, inner)` decomposition of a shape around one axis.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Maps flat output indices of a broadcast op onto an operand.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    Identity,
    /// operand equals the trailing dims of the output
    Suffix(usize),
    /// operand equals the leading dims; each element repeats `inner` times
    Prefix(usize),
    Explicit(Vec<usize>),
}

impl IndexMap {
    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Suffix(len) => i % len,
            IndexMap::Prefix(inner) => i / inner,
            IndexMap::Explicit(v) => v[i],
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dim(op, &[a, b]));
        };
    }
    Ok(out)
}

/// Index map from a broadcast output shape onto an operand shape.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> IndexMap {
    if out == input {
        return IndexMap::Identity;
    }
    let n_out = numel(out);
    let n_in = numel(input);
    // strip leading ones of the input
    let trimmed: Vec<usize> = {
        let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
        input[first..].to_vec()
    };
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return IndexMap::Suffix(n_in.max(1));
    }
    // leading-dims match with trailing ones on the input, e.g. [B,1,1] against [B,T,N]
    let nd = out.len();
    let padded: Vec<usize> = std::iter::repeat(1)
        .take(nd - input.len())
        .chain(input.iter().copied())
        .collect();
    if let Some(k) = padded.iter().rposition(|&d| d != 1) {
        if padded[..=k] == out[..=k] && padded[k + 1..].iter().all(|&d| d == 1) {
            return IndexMap::Prefix(n_out / n_in);
        }
    } else {
        return IndexMap::Suffix(1);
    }
    let in_strides = strides(&padded);
    let eff: Vec<usize> = (0..nd)
        .map(|i| if padded[i] == 1 { 0 } else { in_strides[i] })
        .collect();
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n_out {
        map.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    IndexMap::Explicit(map)
}

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c (+)= aᵀ · b` for `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c (+)= a · bᵀ` for `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm(a, &bt, c, m, k, n);
}

/// Shape bookkeeping for batched matrix products.
///
/// Supported forms: `[.., m, k] × [k, n]` (shared right operand),
/// `[m, k] × [.., k, n]` (shared left operand) and `[.., m, k] × [.., k, n]`
/// with identical batch dims.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub kind: MatmulKind,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum MatmulKind {
    SharedRight,
    SharedLeft,
    Batched,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::dim("matmul", &[a, b]);
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let (kind, batch_dims) = if b_batch.is_empty() {
            (MatmulKind::SharedRight, a_batch)
        } else if a_batch.is_empty() {
            (MatmulKind::SharedLeft, b_batch)
        } else if a_batch == b_batch {
            (MatmulKind::Batched, a_batch)
        } else {
            return Err(err());
        };
        let mut out_shape = batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            out_shape,
            kind,
            batch: numel(batch_dims),
            m,
            k,
            n,
        })
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match self.kind {
            MatmulKind::SharedRight => gemm(a, b, out, self.batch * m, k, n),
            MatmulKind::SharedLeft => {
                for bi in 0..self.batch {
                    gemm(
                        a,
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            MatmulKind::Batched => {
                for bi in 0..self.batch {
                    gemm(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
    }

    /// Accumulates `dA = G·Bᵀ` and `dB = Aᵀ·G` into the provided buffers.
    pub fn backward<T: Scalar>(
        &self,
        a: &[T],
        b: &[T],
        g: &[T],
        da: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        match self.kind {
            MatmulKind::SharedRight => {
                let rows = self.batch * m;
                if let Some(da) = da {
                    gemm_nt(g, b, da, rows, n, k);
                }
                if let Some(db) = db {
                    gemm_tn(a, g, db, k, rows, n);
                }
            }
            MatmulKind::SharedLeft => {
                if let Some(da) = da {
                    for bi in 0..self.batch {
                        gemm_nt(&g[bi * m * n..(bi + 1) * m * n], &b[bi * k * n..(bi + 1) * k * n], da, m, n, k);
                    }
                }
                if let Some(db) = db {
                    for bi in 0..self.batch {
                        gemm_tn(a, &g[bi * m * n..(bi + 1) * m * n], &mut db[bi * k * n..(bi + 1) * k * n], k, m, n);
                    }
                }
            }
            MatmulKind::Batched => {
                let mut da = da;
                let mut db = db;
                for bi in 0..self.batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(da) = da.as_deref_mut() {
                        gemm_nt(gs, &b[bi * k * n..(bi + 1) * k * n], &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                    }
                    if let Some(db) = db.as_deref_mut() {
                        gemm_tn(&a[bi * m * k..(bi + 1) * m * k], gs, &mut db[bi * k * n..(bi + 1) * k * n], k, m, n);
                    }
                }
            }
        }
    }
}
