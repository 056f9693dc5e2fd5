//! Reverse-mode differentiation tape.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever the backward pass needs. Node ids only ever reference earlier
//! nodes, so a single reverse sweep visits them in topological order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_map, broadcast_shape, numel, permute_data, resolve_axis, split_axis,
    IndexMap, MatmulPlan, Tensor,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Sin,
    Exp,
    Log,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Binary { kind: BinKind, a: Var, b: Var, ma: IndexMap, mb: IndexMap },
    Scale { a: Var, s: T },
    Shift { a: Var },
    Unary { kind: UnaryKind, a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, axis: usize, inv_std: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Broadcast { a: Var, map: IndexMap },
    MaskedFill { a: Var, mask: Vec<bool> },
    Gather { a: Var, axis: usize, indices: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation log for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    rng: ChaCha8Rng,
}

/// Gradient of a loss with respect to every node that contributed to it.
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> NodeGrads<T> {
    /// Gradient w.r.t. `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape with a fixed dropout seed of 0.
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A tape that evaluates ops without keeping backward state.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf that mirrors the current value of `v` but blocks gradients.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.forward(self.data(a), self.data(b), &mut out);
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(value, Op::MatMul { a, b, plan }))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let ma = broadcast_map(&out_shape, self.shape(a));
        let mb = broadcast_map(&out_shape, self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let n = numel(&out_shape);
        let out: Vec<T> = match (&ma, &mb) {
            (IndexMap::Identity, IndexMap::Identity) => {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            }
            (IndexMap::Identity, IndexMap::Suffix(l)) => da
                .chunks(*l)
                .flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..n).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, ma, mb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale { a, s })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::Shift { a })
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = |v: T| match kind {
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sin => v.sin(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Abs => v.abs(),
        };
        let value = self.value(a).map(f);
        self.push(value, Op::Unary { kind, a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sin, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: isize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let ax = resolve_axis("concat", axis, &base)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == ax || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::dim("concat", &shapes));
            }
            total += s[ax];
        }
        let (outer, _, inner) = split_axis(&base, ax);
        let mut out_shape = base.clone();
        out_shape[ax] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[ax] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis: ax,
            },
        ))
    }

    fn reduce(&mut self, a: Var, axis: isize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(if mean { "mean" } else { "sum" }, axis, &shape)?;
        let (outer, len, inner) = split_axis(&shape, ax);
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::lit(len as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(ax);
        let value = Tensor::new(out_shape, out)?;
        let op = if mean {
            Op::Mean { a, axis: ax }
        } else {
            Op::Sum { a, axis: ax }
        };
        Ok(self.push(value, op))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_keepdim(&mut self, a: Var, axis: isize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let ax = resolve_axis("sum", axis, &shape)?;
        let s = self.sum(a, axis)?;
        shape[ax] = 1;
        self.reshape(s, &shape)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis("softmax", axis, &shape)?;
        let (outer, len, inner) = split_axis(&shape, ax);
        if len == 0 {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[at(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { a, axis: ax }))
    }

    /// Normalises to zero mean, unit (population) variance along `axis`
    /// with epsilon [`LAYER_NORM_EPS`]; no affine part.
    pub fn layer_norm(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis("layer_norm", axis, &shape)?;
        let (outer, len, inner) = split_axis(&shape, ax);
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let nf = T::lit(len as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mu = (0..len).map(|l| src[at(l)]).sum::<T>() / nf;
                let var = (0..len).map(|l| (src[at(l)] - mu).powi(2)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for l in 0..len {
                    out[at(l)] = (src[at(l)] - mu) * is;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { a, axis: ax, inv_std }))
    }

    /// Inverted dropout; the identity when `train` is false or `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value = {
            let src = self.value(a);
            let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Tensor::new(src.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Dropout { a, mask }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::dim("transpose", &[self.shape(a)]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let out = broadcast_shape("broadcast_to", &src_shape, shape)?;
        if out != shape {
            return Err(Error::dim("broadcast_to", &[&src_shape, shape]));
        }
        let map = broadcast_map(shape, &src_shape);
        let src = self.data(a);
        let data = (0..numel(shape)).map(|i| src[map.at(i)]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Broadcast { a, map }))
    }

    /// Replaces entries where `mask` is true by `fill`; those entries get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::dim("masked_fill", &[src.shape(), &[mask.len()]]));
        }
        let data = src
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&mut self, a: Var, axis: isize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis("gather", axis, &shape)?;
        let (outer, len, inner) = split_axis(&shape, ax);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for axis {ax} of shape {shape:?}"
            )));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let start = (o * len + ix) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[ax] = indices.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                a,
                axis: ax,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn gradients(&self, loss: Var) -> Result<NodeGrads<T>> {
        if !self.record {
            return Err(Error::Contract("backward on a non-recording tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(NodeGrads { grads, shapes })
    }

    /// Gradients of `loss` for every parameter in `store` (zeros when untouched).
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let node_grads = self.gradients(loss)?;
        let mut out = Gradients::zeros_like(store);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &node_grads.grads[i]) {
                let dst = out.grads[id.index()].data_mut();
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, plan } => {
                let (la, lb) = (len_of(*a), len_of(*b));
                let (av, bv) = (self.data(*a), self.data(*b));
                if a == b {
                    let mut ga = vec![T::zero(); la];
                    let mut gb = vec![T::zero(); lb];
                    plan.backward(av, bv, g, Some(&mut ga), Some(&mut gb));
                    let dst = accumulate(&mut grads[a.0], la);
                    for ((d, x), y) in dst.iter_mut().zip(&ga).zip(&gb) {
                        *d += *x + *y;
                    }
                } else {
                    let (lo, hi) = if a.0 < b.0 { (a.0, b.0) } else { (b.0, a.0) };
                    let (left, right) = grads.split_at_mut(hi);
                    let (slot_lo, slot_hi) = (&mut left[lo], &mut right[0]);
                    let (sa, sb) = if a.0 < b.0 { (slot_lo, slot_hi) } else { (slot_hi, slot_lo) };
                    let da = accumulate(sa, la);
                    let db = accumulate(sb, lb);
                    plan.backward(av, bv, g, Some(da.as_mut_slice()), Some(db.as_mut_slice()));
                }
            }
            Op::Binary { kind, a, b, ma, mb } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let out = node.value.data();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        let sign = if *kind == BinKind::Sub { -T::one() } else { T::one() };
                        for (i, &gi) in g.iter().enumerate() {
                            ga[ma.at(i)] += gi;
                            gb[mb.at(i)] += sign * gi;
                        }
                    }
                    BinKind::Mul => {
                        for (i, &gi) in g.iter().enumerate() {
                            let (ia, ib) = (ma.at(i), mb.at(i));
                            ga[ia] += gi * bv[ib];
                            gb[ib] += gi * av[ia];
                        }
                    }
                    BinKind::Div => {
                        for (i, &gi) in g.iter().enumerate() {
                            let (ia, ib) = (ma.at(i), mb.at(i));
                            ga[ia] += gi / bv[ib];
                            gb[ib] -= gi * out[i] / bv[ib];
                        }
                    }
                }
                add_into(&mut grads[a.0], &ga);
                add_into(&mut grads[b.0], &gb);
            }
            Op::Scale { a, s } => {
                let d = accumulate(&mut grads[a.0], g.len());
                for (x, &gi) in d.iter_mut().zip(g) {
                    *x += gi * *s;
                }
            }
            Op::Shift { a } | Op::Reshape { a } => add_into(&mut grads[a.0], g),
            Op::Unary { kind, a } => {
                let x = self.data(*a);
                let y = node.value.data();
                let d = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    let local = match kind {
                        UnaryKind::Relu => {
                            if x[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                        UnaryKind::Tanh => T::one() - y[i] * y[i],
                        UnaryKind::Sin => x[i].cos(),
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => T::one() / x[i],
                        UnaryKind::Abs => {
                            if x[i] > T::zero() {
                                T::one()
                            } else if x[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    d[i] += g[i] * local;
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let d = accumulate(&mut grads[v.0], len_of(v));
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        for (x, &gi) in d[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *x += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = split_axis(shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::lit(len as f64)
                } else {
                    T::one()
                };
                let d = accumulate(&mut grads[a.0], outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        let row = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (x, &gi) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x += gi * scale;
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let d = accumulate(&mut grads[a.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, axis, inv_std } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let nf = T::lit(len as f64);
                let d = accumulate(&mut grads[a.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mg = (0..len).map(|l| g[at(l)]).sum::<T>() / nf;
                        let mgy = (0..len).map(|l| g[at(l)] * y[at(l)]).sum::<T>() / nf;
                        let is = inv_std[o * inner + i];
                        for l in 0..len {
                            d[at(l)] += is * (g[at(l)] - mg - y[at(l)] * mgy);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let d = accumulate(&mut grads[a.0], g.len());
                for ((x, &gi), &m) in d.iter_mut().zip(g).zip(mask) {
                    *x += gi * m;
                }
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                add_into(&mut grads[a.0], &back);
            }
            Op::Broadcast { a, map } => {
                let d = accumulate(&mut grads[a.0], len_of(*a));
                for (i, &gi) in g.iter().enumerate() {
                    d[map.at(i)] += gi;
                }
            }
            Op::MaskedFill { a, mask } => {
                let d = accumulate(&mut grads[a.0], g.len());
                for ((x, &gi), &m) in d.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *x += gi;
                    }
                }
            }
            Op::Gather { a, axis, indices } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = split_axis(shape, *axis);
                let d = accumulate(&mut grads[a.0], outer * len * inner);
                let k = indices.len();
                for o in 0..outer {
                    for (j, &ix) in indices.iter().enumerate() {
                        let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut d[(o * len + ix) * inner..(o * len + ix + 1) * inner];
                        for (x, &gi) in dst.iter_mut().zip(src) {
                            *x += gi;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(d) => {
            for (x, &gi) in d.iter_mut().zip(g) {
                *x += gi;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central difference with step `eps`.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Contract("finite difference step must be positive".into()));
    }
    let eval = |point: &Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        Ok(y)
    };
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let analytic = tape.gradients(out)?.wrt(v);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (two * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(a, -1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_axis_is_invalid() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3, 0]));
        assert!(matches!(tape.softmax(a, 1), Err(Error::InvalidAxis { .. })));
        assert!(matches!(tape.softmax(a, 2), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn layer_norm_two_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(a, -1).unwrap();
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        let got = tape.value(y).data();
        assert!((got[0] + expect).abs() < 1e-15 && (got[1] - expect).abs() < 1e-15);
        assert!((got[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.gradients(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0]));
        let unused = store.add("unused", t(&[3], &[1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let loss = tape.sum_all(u).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(used).data(), &[1.0, 1.0]);
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_mean_matches_finite_differences() {
        let w = random(&[4, 2], 7);
        let x = random(&[3, 4], 8);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, xv| {
                let wv = tape.constant(wc.clone());
                let y = tape.matmul(xv, wv)?;
                tape.mean_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_difference_check(
            move |tape, wv| {
                let xv = tape.constant(x.clone());
                let y = tape.matmul(xv, wv)?;
                tape.mean_all(y)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_then_sum_has_zero_gradient() {
        let x = random(&[2, 5], 3);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, -1).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let g = tape.gradients(loss).unwrap().wrt(v);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn fd_check_linear_and_sine() {
        let x = random(&[6], 1);
        let err = finite_difference_check(|tape, v| tape.sum_all(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10);
        let x = t(&[2], &[0.0, std::f64::consts::FRAC_PI_2]);
        let err = finite_difference_check(
            |tape, v| {
                let s = tape.sin(v);
                tape.sum_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_rejects_non_finite() {
        let x = t(&[1], &[0.0]);
        let r = finite_difference_check(
            |tape, v| {
                let l = tape.log(v);
                tape.sum_all(l)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn dropout_identity_at_eval_and_seeded_at_train() {
        let mut tape = Tape::<f64>::with_seed(5);
        let x = tape.constant(Tensor::ones(&[100]));
        assert_eq!(tape.dropout(x, 0.2, false).unwrap(), x);
        let a = tape.dropout(x, 0.2, true).unwrap();
        let mut other = Tape::<f64>::with_seed(5);
        let y = other.constant(Tensor::ones(&[100]));
        let b = other.dropout(y, 0.2, true).unwrap();
        assert_eq!(tape.value(a), other.value(b));
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        assert!(tape.dropout(x, 1.0, true).is_err());
    }

    #[test]
    fn every_differentiable_op_passes_gradient_check() {
        type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;
        let other = random(&[3, 4], 99);
        let o2 = other.clone();
        let o3 = other.clone();
        let o4 = random(&[4], 98);
        let cases: Vec<(&str, Build)> = vec![
            ("add", Box::new(move |t, x| { let o = t.constant(other.clone()); t.add(x, o) })),
            ("sub", Box::new(move |t, x| { let o = t.constant(o2.clone()); t.sub(o, x) })),
            ("mul", Box::new(move |t, x| { let o = t.constant(o3.clone()); t.mul(x, o) })),
            ("div_bcast", Box::new(move |t, x| {
                let o = t.constant(o4.map(|v| v.abs() + 1.0));
                t.div(x, o)
            })),
            ("div_denominator", Box::new(|t, x| {
                let sq = t.mul(x, x)?;
                let den = t.shift(sq, 1.0);
                let one = t.constant(Tensor::ones(&[4]));
                t.div(one, den)
            })),
            ("scale", Box::new(|t, x| Ok(t.scale(x, 3.5)))),
            ("relu", Box::new(|t, x| Ok(t.relu(x)))),
            ("sigmoid", Box::new(|t, x| Ok(t.sigmoid(x)))),
            ("tanh", Box::new(|t, x| Ok(t.tanh(x)))),
            ("sin", Box::new(|t, x| Ok(t.sin(x)))),
            ("exp", Box::new(|t, x| Ok(t.exp(x)))),
            ("abs", Box::new(|t, x| Ok(t.abs(x)))),
            ("log", Box::new(|t, x| { let e = t.exp(x); Ok(t.log(e)) })),
            ("concat", Box::new(|t, x| { let s = t.sin(x); t.concat(&[x, s], 0) })),
            ("sum", Box::new(|t, x| t.sum(x, 1))),
            ("mean", Box::new(|t, x| t.mean(x, 0))),
            ("softmax", Box::new(|t, x| t.softmax(x, 0))),
            ("layer_norm", Box::new(|t, x| t.layer_norm(x, -1))),
            ("transpose", Box::new(|t, x| t.transpose(x))),
            ("reshape", Box::new(|t, x| t.reshape(x, &[2, 6]))),
            ("broadcast", Box::new(|t, x| { let r = t.reshape(x, &[1, 3, 4])?; t.broadcast_to(r, &[2, 3, 4]) })),
            ("masked_fill", Box::new(|t, x| { let m: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect(); t.masked_fill(x, &m, 0.0) })),
            ("gather", Box::new(|t, x| t.gather(x, 1, &[3, 0, 3]))),
            ("matmul_self", Box::new(|t, x| { let xt = t.transpose(x)?; t.matmul(x, xt) })),
        ];
        let x = random(&[3, 4], 11);
        for (name, build) in cases {
            // weight the output so the check is not a plain sum
            let weights = random(&[64], 12);
            let err = finite_difference_check(
                |t, v| {
                    let y = build(t, v)?;
                    let n = t.value(y).len();
                    let w = t.constant(Tensor::new(t.shape(y).to_vec(), weights.data()[..n].to_vec())?);
                    let p = t.mul(y, w)?;
                    t.sum_all(p)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
