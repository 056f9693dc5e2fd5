//! Spatial graph builders for the four expert kinds.
//!
//! Each builder has a plain-value form returning an [`AdjacencyMatrix`] and,
//! where parameters are learned, a tape form used during training. The
//! plain forms run the tape forms on an inference tape so the two never
//! drift apart.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dense `N×N` nonnegative edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix<T> {
    weights: Tensor<T>,
}

impl<T: Scalar> AdjacencyMatrix<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::dim("adjacency", &[s]));
        }
        if let Some(v) = weights.data().iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Contract(format!("adjacency entry {v} is negative or NaN")));
        }
        Ok(AdjacencyMatrix { weights })
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.weights.data()[i * self.n() + j]
    }

    pub fn row_sums(&self) -> Vec<T> {
        let n = self.n();
        self.weights.data().chunks(n).map(|r| r.iter().copied().sum()).collect()
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.data().iter().filter(|&&v| v != T::zero()).count()
    }

    /// Every row with any mass sums to one within `tol`.
    pub fn is_row_stochastic(&self, tol: T) -> bool {
        self.row_sums()
            .into_iter()
            .all(|s| s == T::zero() || (s - T::one()).abs() <= tol)
    }

    /// `{0,1}` matrix marking direct links between distinct nodes.
    pub fn link_bits(&self) -> Tensor<T> {
        let n = self.n();
        Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            if i != j && self.weights.data()[k] > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// `I_n`: self-loops only.
pub fn identity_graph<T: Scalar>(n: usize) -> Result<AdjacencyMatrix<T>> {
    if n == 0 {
        return Err(Error::Config("graph needs at least one node".into()));
    }
    AdjacencyMatrix::new(Tensor::eye(n))
}

/// One weighted, directed edge; `line` is the 1-based source line for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub line: usize,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.from, self.to, self.weight)
    }
}

/// Parses `from,to,weight` lines; blank lines and `#` comments are skipped.
pub fn parse_edge_list(text: &str, source: &str) -> Result<Vec<Edge>> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        let loc = || format!("{source}:{line}");
        if fields.len() != 3 {
            return Err(Error::ingest(loc(), format!("expected from,to,weight, got {content:?}")));
        }
        let from = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::ingest(loc(), format!("bad source index {:?}", fields[0])))?;
        let to = fields[1]
            .parse::<usize>()
            .map_err(|_| Error::ingest(loc(), format!("bad target index {:?}", fields[1])))?;
        let weight = fields[2]
            .parse::<f64>()
            .map_err(|_| Error::ingest(loc(), format!("bad weight {:?}", fields[2])))?;
        edges.push(Edge { from, to, weight, line });
    }
    Ok(edges)
}

pub fn format_edge_list<T: Scalar>(graph: &AdjacencyMatrix<T>) -> String {
    let mut out = String::from("# from,to,weight\n");
    let n = graph.n();
    for i in 0..n {
        for j in 0..n {
            let w = graph.get(i, j);
            if w != T::zero() {
                out.push_str(&format!("{i},{j},{}\n", w.as_f64()));
            }
        }
    }
    out
}

/// Dense matrix from an edge list. Duplicate edges add up; rows without
/// any outgoing weight receive a unit self-loop.
pub fn load_static_graph<T: Scalar>(edges: &[Edge], n: usize) -> Result<AdjacencyMatrix<T>> {
    if n == 0 {
        return Err(Error::Config("graph needs at least one node".into()));
    }
    let mut w = vec![0.0f64; n * n];
    for e in edges {
        let loc = format!("line {}", e.line);
        if e.from >= n || e.to >= n {
            return Err(Error::ingest(
                loc,
                format!("edge {e} references a node outside [0, {n})"),
            ));
        }
        if !(e.weight >= 0.0) || !e.weight.is_finite() {
            return Err(Error::ingest(loc, format!("edge {e} has an invalid weight")));
        }
        w[e.from * n + e.to] += e.weight;
    }
    for i in 0..n {
        if w[i * n..(i + 1) * n].iter().all(|&v| v == 0.0) {
            w[i * n + i] = 1.0;
        }
    }
    AdjacencyMatrix::new(Tensor::from_f64(vec![n, n], &w)?)
}

/// `Â[i][j] = A[i][j] / Σ_j A[i][j]`; all-zero rows become self-loops first.
pub fn row_normalize<T: Scalar>(a: &AdjacencyMatrix<T>) -> Result<AdjacencyMatrix<T>> {
    let mut tape = Tape::inference();
    let v = tape.constant(a.weights.clone());
    let out = row_normalize_tape(&mut tape, v)?;
    AdjacencyMatrix::new(tape.value(out).clone())
}

/// Row normalisation over the last axis of a `[.., N, N]` tensor.
pub fn row_normalize_tape<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != shape[nd - 2] {
        return Err(Error::dim("row_normalize", &[&shape]));
    }
    let n = shape[nd - 1];
    let values = tape.value(a);
    if let Some(v) = values.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Contract(format!("row_normalize needs nonnegative input, found {v}")));
    }
    let mut loops = vec![T::zero(); values.len()];
    let mut any_empty = false;
    for (r, row) in values.data().chunks(n).enumerate() {
        if row.iter().all(|&v| v == T::zero()) {
            loops[r * n + r % n] = T::one();
            any_empty = true;
        }
    }
    let a = if any_empty {
        let fix = tape.constant(Tensor::new(shape.clone(), loops)?);
        tape.add(a, fix)?
    } else {
        a
    };
    let sums = tape.sum_keepdim(a, -1)?;
    tape.div(a, sums)
}

/// Learnable node embeddings for the adaptive graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveEmbeddings<T> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> AdaptiveEmbeddings<T> {
    pub fn new(source: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        if source.ndim() != 2 || source.shape() != target.shape() || source.shape()[1] == 0 {
            return Err(Error::dim("adaptive_graph", &[source.shape(), target.shape()]));
        }
        Ok(AdaptiveEmbeddings { source, target })
    }
}

/// `softmax_row(relu(E1·E2ᵀ))`.
pub fn adaptive_graph<T: Scalar>(emb: &AdaptiveEmbeddings<T>) -> Result<AdjacencyMatrix<T>> {
    let mut tape = Tape::inference();
    let e1 = tape.constant(emb.source.clone());
    let e2 = tape.constant(emb.target.clone());
    let out = adaptive_graph_tape(&mut tape, e1, e2)?;
    AdjacencyMatrix::new(tape.value(out).clone())
}

pub fn adaptive_graph_tape<T: Scalar>(tape: &mut Tape<T>, e1: Var, e2: Var) -> Result<Var> {
    let e2t = tape.transpose(e2)?;
    let logits = tape.matmul(e1, e2t)?;
    let logits = tape.relu(logits);
    tape.softmax(logits, -1)
}

/// Query/key projections of the attention-derived graph, each `[d, d_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGraphParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
}

/// `softmax_row((H·W_q)(H·W_k)ᵀ / √d_k)` for one step of node states `H: [N, d]`.
pub fn attention_graph<T: Scalar>(h: &Tensor<T>, params: &AttentionGraphParams<T>) -> Result<AdjacencyMatrix<T>> {
    let mut tape = Tape::inference();
    let hv = tape.constant(h.clone());
    let wq = tape.constant(params.w_q.clone());
    let wk = tape.constant(params.w_k.clone());
    let out = attention_graph_tape(&mut tape, hv, wq, wk)?;
    AdjacencyMatrix::new(tape.value(out).clone())
}

/// Batched form: `h` is `[.., N, d]`, result `[.., N, N]`.
pub fn attention_graph_tape<T: Scalar>(tape: &mut Tape<T>, h: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let dk = *tape.shape(w_k).last().unwrap_or(&1);
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, T::one() / T::lit(dk as f64).sqrt());
    tape.softmax(logits, -1)
}

/// Cosine similarity; zero when either vector is all-zero.
pub fn semantic_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("semantic_similarity", &[&[a.len()], &[b.len()]]));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Ok(T::zero());
    }
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Pairwise cosine similarities for node features `[.., N, F]`, giving `[.., N, N]`.
pub fn similarity_matrix<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() < 2 {
        return Err(Error::dim("similarity_matrix", &[s]));
    }
    let (n, f) = (s[s.len() - 2], s[s.len() - 1]);
    let outer = features.len() / (n * f).max(1);
    let mut out_shape = s[..s.len() - 1].to_vec();
    out_shape.push(n);
    let mut out = Vec::with_capacity(outer * n * n);
    for o in 0..outer {
        let block = &features.data()[o * n * f..(o + 1) * n * f];
        for i in 0..n {
            for j in 0..n {
                out.push(semantic_similarity(&block[i * f..(i + 1) * f], &block[j * f..(j + 1) * f])?);
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Shared two-layer perceptron scoring `[link bit, similarity]` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScoreMlp<T> {
    /// `[2, H]`
    pub w1: Tensor<T>,
    /// `[H]`
    pub b1: Tensor<T>,
    /// `[H, 1]`
    pub w2: Tensor<T>,
    /// `[1]`
    pub b2: Tensor<T>,
}

impl<T: Scalar> EdgeScoreMlp<T> {
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let ids = EdgeMlpIds::register(&mut store, "mlp", hidden, rng);
        ids.extract(&store)
    }
}

/// Parameter ids of an [`EdgeScoreMlp`] living in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct EdgeMlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EdgeMlpIds {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        EdgeMlpIds {
            w1: store.add_glorot(format!("{prefix}.w1"), 2, hidden, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add_glorot(format!("{prefix}.w2"), hidden, 1, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1])),
        }
    }

    pub fn extract<T: Scalar>(&self, store: &ParamStore<T>) -> EdgeScoreMlp<T> {
        EdgeScoreMlp {
            w1: store.get(self.w1).clone(),
            b1: store.get(self.b1).clone(),
            w2: store.get(self.w2).clone(),
            b2: store.get(self.b2).clone(),
        }
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> EdgeMlpVars {
        EdgeMlpVars {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EdgeMlpVars {
    pub fn constants<T: Scalar>(tape: &mut Tape<T>, mlp: &EdgeScoreMlp<T>) -> Self {
        EdgeMlpVars {
            w1: tape.constant(mlp.w1.clone()),
            b1: tape.constant(mlp.b1.clone()),
            w2: tape.constant(mlp.w2.clone()),
            b2: tape.constant(mlp.b2.clone()),
        }
    }
}

fn check_bits<T: Scalar>(bits: &Tensor<T>) -> Result<()> {
    if let Some(v) = bits.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Input(format!("link indicator must be 0 or 1, found {v}")));
    }
    Ok(())
}

/// `scores[i][j] = mlp([bits[i][j], sims[i][j]])`.
pub fn hybrid_edge_scores<T: Scalar>(bits: &Tensor<T>, sims: &Tensor<T>, mlp: &EdgeScoreMlp<T>) -> Result<Tensor<T>> {
    check_bits(bits)?;
    let mut tape = Tape::inference();
    let b = tape.constant(bits.clone());
    let s = tape.constant(sims.clone());
    let vars = EdgeMlpVars::constants(&mut tape, mlp);
    let out = edge_scores_tape(&mut tape, b, s, vars)?;
    Ok(tape.value(out).clone())
}

/// `bits` is `[N, N]` (shared) or matches `sims`, which is `[.., N, N]`.
pub fn edge_scores_tape<T: Scalar>(tape: &mut Tape<T>, bits: Var, sims: Var, mlp: EdgeMlpVars) -> Result<Var> {
    let sims_shape = tape.shape(sims).to_vec();
    let bits_shape = tape.shape(bits).to_vec();
    let nd = sims_shape.len();
    if nd < 2 || bits_shape.len() < 2 || bits_shape[bits_shape.len() - 2..] != sims_shape[nd - 2..] {
        return Err(Error::dim("hybrid_edge_scores", &[&bits_shape, &sims_shape]));
    }
    let bits = if bits_shape != sims_shape {
        tape.broadcast_to(bits, &sims_shape)?
    } else {
        bits
    };
    let mut col = sims_shape.clone();
    col.push(1);
    let b = tape.reshape(bits, &col)?;
    let s = tape.reshape(sims, &col)?;
    let pairs = tape.concat(&[b, s], -1)?;
    let h = tape.matmul(pairs, mlp.w1)?;
    let h = tape.add(h, mlp.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add(o, mlp.b2)?;
    tape.reshape(o, &sims_shape)
}

/// Number of edges kept: `⌈N²·ρ⌉`.
pub fn sparsity_k(n: usize, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("sparsity ratio {rho} outside (0, 1]")));
    }
    let total = n * n;
    // guard against products like 100 * 0.07 = 7.000000000000001
    let k = ((total as f64) * rho - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(total))
}

/// Keep-mask of the `k` largest scores; ties go to the lower flat index.
pub fn topk_mask<T: Scalar>(scores: &[T], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Global top-`⌈N²ρ⌉` edge selection; kept scores map through `exp`, the rest become 0.
pub fn topk_sparsify<T: Scalar>(scores: &Tensor<T>, rho: f64) -> Result<AdjacencyMatrix<T>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("topk_sparsify", &[s]));
    }
    let k = sparsity_k(s[0], rho)?;
    let keep = topk_mask(scores.data(), k);
    let data = scores
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &kept)| if kept { v.exp() } else { T::zero() })
        .collect();
    AdjacencyMatrix::new(Tensor::new(s.to_vec(), data)?)
}

/// Sparsify and normalise a batch of score matrices `[.., N, N]` on the tape.
///
/// Selection is a constant mask, so gradients reach kept scores only. Scores
/// are shifted by their (detached) maximum before `exp`; the shift cancels
/// in the row normalisation.
pub fn sparse_normalized_tape<T: Scalar>(tape: &mut Tape<T>, scores: Var, rho: f64) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != shape[nd - 2] {
        return Err(Error::dim("topk_sparsify", &[&shape]));
    }
    let n = shape[nd - 1];
    let k = sparsity_k(n, rho)?;
    let values = tape.value(scores).data().to_vec();
    let mut drop = Vec::with_capacity(values.len());
    let mut shift = Vec::with_capacity(values.len());
    for block in values.chunks(n * n) {
        let keep = topk_mask(block, k);
        let mx = block
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        drop.extend(keep.iter().map(|&k| !k));
        shift.extend(std::iter::repeat(mx).take(n * n));
    }
    let shift = tape.constant(Tensor::new(shape.clone(), shift)?);
    let centered = tape.sub(scores, shift)?;
    let pos = tape.exp(centered);
    let sparse = tape.masked_fill(pos, &drop, T::zero())?;
    row_normalize_tape(tape, sparse)
}

/// Scores → global top-k → row normalisation.
pub fn hybrid_graph<T: Scalar>(
    bits: &Tensor<T>,
    sims: &Tensor<T>,
    mlp: &EdgeScoreMlp<T>,
    rho: f64,
) -> Result<AdjacencyMatrix<T>> {
    check_bits(bits)?;
    let mut tape = Tape::inference();
    let b = tape.constant(bits.clone());
    let s = tape.constant(sims.clone());
    let vars = EdgeMlpVars::constants(&mut tape, mlp);
    let scores = edge_scores_tape(&mut tape, b, s, vars)?;
    let out = sparse_normalized_tape(&mut tape, scores, rho)?;
    AdjacencyMatrix::new(tape.value(out).clone())
}
