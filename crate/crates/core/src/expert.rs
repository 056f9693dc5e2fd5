//! Shared four-block expert backbone.
//!
//! Block order per expert: temporal self-attention, spatial aggregation
//! (the only block whose graph differs by kind), time-enhanced
//! cross-attention from future time embeddings to history, and a
//! position-wise feedforward. Each block is a residual followed by layer
//! norm. A shared affine map projects hidden states to output channels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::{
    adaptive_graph_tape, attention_graph_tape, edge_scores_tape, sparse_normalized_tape, EdgeMlpIds,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Source of an expert's spatial graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertKind {
    Identity,
    Adaptive,
    Attention,
    SpatioSemantic,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Identity,
        ExpertKind::Adaptive,
        ExpertKind::Attention,
        ExpertKind::SpatioSemantic,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            ExpertKind::Identity => "Id",
            ExpertKind::Adaptive => "Ad",
            ExpertKind::Attention => "At",
            ExpertKind::SpatioSemantic => "SS",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" | "identity" => Ok(ExpertKind::Identity),
            "ad" | "adaptive" => Ok(ExpertKind::Adaptive),
            "at" | "attention" => Ok(ExpertKind::Attention),
            "ss" | "spatiosemantic" | "spatio-semantic" => Ok(ExpertKind::SpatioSemantic),
            other => Err(Error::Config(format!(
                "unknown expert kind {other:?} (expected Id, Ad, At or SS)"
            ))),
        }
    }
}

/// Non-empty, duplicate-free list of expert kinds, written `Id+Ad+SS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ExpertSet(Vec<ExpertKind>);

impl ExpertSet {
    pub fn new(kinds: Vec<ExpertKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("an expert set needs at least one expert".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::Config(format!("expert {k} listed twice")));
            }
        }
        Ok(ExpertSet(kinds))
    }

    pub fn full() -> Self {
        ExpertSet(ExpertKind::ALL.to_vec())
    }

    pub fn kinds(&self) -> &[ExpertKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ExpertSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|k| k.abbrev()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ExpertSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .split('+')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        ExpertSet::new(kinds)
    }
}

impl TryFrom<String> for ExpertSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExpertSet> for String {
    fn from(s: ExpertSet) -> String {
        s.to_string()
    }
}

/// Sizes shared by every expert of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub nodes: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_time: usize,
    pub layers: usize,
    pub adaptive_dim: usize,
    pub edge_hidden: usize,
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("adaptive_dim", self.adaptive_dim),
            ("edge_hidden", self.edge_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_time < 2 {
            return Err(Error::Config("d_time must be at least 2".into()));
        }
        Ok(())
    }
}

/// Ids of one attention block (projections plus residual layer norm).
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl AttentionIds {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        AttentionIds {
            wq: store.add_glorot(format!("{prefix}.wq"), d, d, rng),
            wk: store.add_glorot(format!("{prefix}.wk"), d, d, rng),
            wv: store.add_glorot(format!("{prefix}.wv"), d, d, rng),
            wo: store.add_glorot(format!("{prefix}.wo"), d, d, rng),
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::ones(&[d])),
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> AttentionVars {
        AttentionVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            wo: tape.param(store, self.wo),
            ln_gain: tape.param(store, self.ln_gain),
            ln_bias: tape.param(store, self.ln_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl FeedForwardIds {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let inner = 4 * d;
        FeedForwardIds {
            w1: store.add_glorot(format!("{prefix}.w1"), d, inner, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[inner])),
            w2: store.add_glorot(format!("{prefix}.w2"), inner, d, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::ones(&[d])),
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
            ln_gain: tape.param(store, self.ln_gain),
            ln_bias: tape.param(store, self.ln_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Kind-specific graph parameters.
#[derive(Debug, Clone, Copy)]
pub enum GraphIds {
    Identity,
    Adaptive { source: ParamId, target: ParamId },
    Attention { wq: ParamId, wk: ParamId },
    SpatioSemantic(EdgeMlpIds),
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialIds {
    pub w: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub temporal: AttentionIds,
    pub spatial: SpatialIds,
}

/// Parameter set of one expert plus its kind tag.
#[derive(Debug, Clone)]
pub struct ExpertBundle {
    pub kind: ExpertKind,
    pub layers: Vec<LayerIds>,
    pub graph: GraphIds,
    /// Maps future time embeddings `[d_t]` to query seeds `[d]`.
    pub future_query: ParamId,
    pub time_enhanced: AttentionIds,
    pub feedforward: FeedForwardIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ExpertBundle {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: ExpertKind,
        dims: &BackboneDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let layers = (0..dims.layers)
            .map(|l| LayerIds {
                temporal: AttentionIds::register(store, &format!("{prefix}.layer{l}.temporal"), d, rng),
                spatial: SpatialIds {
                    w: store.add_glorot(format!("{prefix}.layer{l}.spatial.w"), d, d, rng),
                    ln_gain: store.add(format!("{prefix}.layer{l}.spatial.ln_gain"), Tensor::ones(&[d])),
                    ln_bias: store.add(format!("{prefix}.layer{l}.spatial.ln_bias"), Tensor::zeros(&[d])),
                },
            })
            .collect();
        let graph = match kind {
            ExpertKind::Identity => GraphIds::Identity,
            ExpertKind::Adaptive => {
                let (n, de) = (dims.nodes, dims.adaptive_dim);
                let e1 = Tensor::from_fn(&[n, de], |_| T::lit(rng.gen_range(-1.0..1.0)));
                let e2 = Tensor::from_fn(&[n, de], |_| T::lit(rng.gen_range(-1.0..1.0)));
                let source = store.add(format!("{prefix}.graph.source"), e1);
                let target = store.add(format!("{prefix}.graph.target"), e2);
                GraphIds::Adaptive { source, target }
            }
            ExpertKind::Attention => GraphIds::Attention {
                wq: store.add_glorot(format!("{prefix}.graph.wq"), d, d, rng),
                wk: store.add_glorot(format!("{prefix}.graph.wk"), d, d, rng),
            },
            ExpertKind::SpatioSemantic => GraphIds::SpatioSemantic(EdgeMlpIds::register(
                store,
                &format!("{prefix}.graph.mlp"),
                dims.edge_hidden,
                rng,
            )),
        };
        Ok(ExpertBundle {
            kind,
            layers,
            graph,
            future_query: store.add_glorot(format!("{prefix}.future_query"), dims.d_time, d, rng),
            time_enhanced: AttentionIds::register(store, &format!("{prefix}.time_enhanced"), d, rng),
            feedforward: FeedForwardIds::register(store, &format!("{prefix}.feedforward"), d, rng),
            out_w: store.add_glorot(format!("{prefix}.out.w"), d, dims.channels, rng),
            out_b: store.add(format!("{prefix}.out.b"), Tensor::zeros(&[dims.channels])),
        })
    }
}

/// Inputs shared by all experts for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ExpertInput {
    /// Embedded history `[B, T', N, d]`.
    pub hidden: Var,
    /// Time embeddings of the forecast steps `[B, T, d_t]`.
    pub future_time: Var,
    /// Road-link indicator bits `[N, N]`, required by the semantic expert.
    pub link_bits: Option<Var>,
    /// Pairwise window similarities `[B, N, N]`, required by the semantic expert.
    pub similarity: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertOutput {
    /// `[B, T, N, C]` in normalised units.
    pub forecast: Var,
    /// `[B, T, N, d]`.
    pub hidden: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub heads: usize,
    pub dropout: f64,
    pub train: bool,
    pub rho: f64,
}

/// `x · gain + bias` after layer norm over the last axis.
pub fn affine_layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, -1)?;
    let s = tape.mul(n, gain)?;
    tape.add(s, bias)
}

/// Multi-head scaled dot-product attention over the second-to-last axis.
///
/// `query` is `[P.., Lq, d]` and `memory` is `[P.., Lk, d]` with identical
/// prefix dims. Returns the projected output `[P.., Lq, d]` and the
/// attention weights `[P.., h, Lq, Lk]`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    memory: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = tape.shape(query).to_vec();
    let ms = tape.shape(memory).to_vec();
    let nd = qs.len();
    if nd < 2 || ms.len() != nd || qs[..nd - 2] != ms[..nd - 2] || qs[nd - 1] != ms[nd - 1] {
        return Err(Error::dim("attention", &[&qs, &ms]));
    }
    let d = qs[nd - 1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("heads ({heads}) must divide d_model ({d})")));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Var, w: Var, len: usize| -> Result<Var> {
        let proj = tape.matmul(x, w)?;
        let mut s = qs[..nd - 2].to_vec();
        s.extend([len, heads, dh]);
        let r = tape.reshape(proj, &s)?;
        let mut axes: Vec<usize> = (0..nd - 2).collect();
        axes.extend([nd - 1, nd - 2, nd]);
        tape.permute(r, &axes)
    };
    let (lq, lk) = (qs[nd - 2], ms[nd - 2]);
    let q = split(tape, query, p.wq, lq)?;
    let k = split(tape, memory, p.wk, lk)?;
    let v = split(tape, memory, p.wv, lk)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, T::one() / T::lit(dh as f64).sqrt());
    let weights = tape.softmax(logits, -1)?;
    let ctx = tape.matmul(weights, v)?;
    let mut axes: Vec<usize> = (0..nd - 2).collect();
    axes.extend([nd - 1, nd - 2, nd]);
    let ctx = tape.permute(ctx, &axes)?;
    let mut merged = qs[..nd - 2].to_vec();
    merged.extend([lq, d]);
    let ctx = tape.reshape(ctx, &merged)?;
    let out = tape.matmul(ctx, p.wo)?;
    Ok((out, weights))
}

/// Per-node self-attention over time: `LN(X + Attn(X))` for `X: [B, T', N, d]`.
pub fn temporal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    opts: &BlockOptions,
) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(Error::dim("temporal_attention", &[tape.shape(x)]));
    }
    let by_node = tape.permute(x, &[0, 2, 1, 3])?;
    let (attn, _) = multi_head_attention(tape, by_node, by_node, p, opts.heads)?;
    let attn = tape.permute(attn, &[0, 2, 1, 3])?;
    let attn = tape.dropout(attn, opts.dropout, opts.train)?;
    let res = tape.add(x, attn)?;
    affine_layer_norm(tape, res, p.ln_gain, p.ln_bias)
}

/// `relu(Â · X_t · W_s)` for every step; `adj` is `[N, N]`, `[B, N, N]` or
/// `[B, T', N, N]`, or `None` for the identity graph.
pub fn spatial_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, adj: Option<Var>, w_s: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::dim("spatial_conv", &[&xs]));
    }
    let n = xs[2];
    let mixed = match adj {
        None => x,
        Some(a) => {
            let s = tape.shape(a).to_vec();
            let ok = s.len() >= 2
                && s[s.len() - 1] == n
                && s[s.len() - 2] == n
                && match s.len() {
                    2 => true,
                    3 => s[0] == xs[0],
                    4 => s[..2] == xs[..2],
                    _ => false,
                };
            if !ok {
                return Err(Error::dim("spatial_conv", &[&s, &xs]));
            }
            let a = if s.len() == 3 {
                let r = tape.reshape(a, &[s[0], 1, n, n])?;
                tape.broadcast_to(r, &[xs[0], xs[1], n, n])?
            } else {
                a
            };
            tape.matmul(a, x)?
        }
    };
    let h = tape.matmul(mixed, w_s)?;
    Ok(tape.relu(h))
}

/// Cross-attention from future query seeds to history.
///
/// `history` is `[B, T', N, d]`, `future` is `[B, T, d]` (one seed per
/// forecast step, shared by all nodes). Returns `LN(U + Attn(U, H))` as
/// `[B, T, N, d]` and the weights `[B, N, h, T, T']`.
pub fn time_enhanced_attention<T: Scalar>(
    tape: &mut Tape<T>,
    history: Var,
    future: Var,
    p: &AttentionVars,
    opts: &BlockOptions,
) -> Result<(Var, Var)> {
    let hs = tape.shape(history).to_vec();
    let fs = tape.shape(future).to_vec();
    if hs.len() != 4 || fs.len() != 3 || fs[0] != hs[0] || fs[2] != hs[3] {
        return Err(Error::dim("time_enhanced_attention", &[&hs, &fs]));
    }
    let (b, n, steps, d) = (hs[0], hs[2], fs[1], hs[3]);
    let seeds = tape.reshape(future, &[b, 1, steps, d])?;
    let seeds = tape.broadcast_to(seeds, &[b, n, steps, d])?;
    let memory = tape.permute(history, &[0, 2, 1, 3])?;
    let (attn, weights) = multi_head_attention(tape, seeds, memory, p, opts.heads)?;
    let attn = tape.dropout(attn, opts.dropout, opts.train)?;
    let res = tape.add(seeds, attn)?;
    let out = affine_layer_norm(tape, res, p.ln_gain, p.ln_bias)?;
    Ok((tape.permute(out, &[0, 2, 1, 3])?, weights))
}

/// `LN(H + W2·relu(W1·H + b1) + b2)` with inner width `4d`.
pub fn feedforward<T: Scalar>(tape: &mut Tape<T>, h: Var, p: &FeedForwardVars, opts: &BlockOptions) -> Result<Var> {
    let a = tape.matmul(h, p.w1)?;
    let a = tape.add(a, p.b1)?;
    let a = tape.relu(a);
    let o = tape.matmul(a, p.w2)?;
    let o = tape.add(o, p.b2)?;
    let o = tape.dropout(o, opts.dropout, opts.train)?;
    let res = tape.add(h, o)?;
    affine_layer_norm(tape, res, p.ln_gain, p.ln_bias)
}

/// Full expert forward pass.
pub fn run_expert<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    bundle: &ExpertBundle,
    input: &ExpertInput,
    opts: &BlockOptions,
) -> Result<ExpertOutput> {
    // graphs that do not depend on hidden states are built once
    let fixed_graph = match bundle.graph {
        GraphIds::Identity | GraphIds::Attention { .. } => None,
        GraphIds::Adaptive { source, target } => {
            let e1 = tape.param(store, source);
            let e2 = tape.param(store, target);
            Some(adaptive_graph_tape(tape, e1, e2)?)
        }
        GraphIds::SpatioSemantic(ids) => {
            let (Some(bits), Some(sims)) = (input.link_bits, input.similarity) else {
                return Err(Error::Config(
                    "the semantic expert needs a static road graph and window similarities".into(),
                ));
            };
            let mlp = ids.vars(tape, store);
            let scores = edge_scores_tape(tape, bits, sims, mlp)?;
            Some(sparse_normalized_tape(tape, scores, opts.rho)?)
        }
    };

    let mut h = input.hidden;
    for layer in &bundle.layers {
        let tv = layer.temporal.vars(tape, store);
        let ht = temporal_attention(tape, h, &tv, opts)?;
        let adj = match bundle.graph {
            GraphIds::Attention { wq, wk } => {
                let q = tape.param(store, wq);
                let k = tape.param(store, wk);
                Some(attention_graph_tape(tape, ht, q, k)?)
            }
            _ => fixed_graph,
        };
        let ws = tape.param(store, layer.spatial.w);
        let hs = spatial_conv(tape, ht, adj, ws)?;
        let hs = tape.dropout(hs, opts.dropout, opts.train)?;
        let res = tape.add(ht, hs)?;
        let g = tape.param(store, layer.spatial.ln_gain);
        let b = tape.param(store, layer.spatial.ln_bias);
        h = affine_layer_norm(tape, res, g, b)?;
    }

    let wu = tape.param(store, bundle.future_query);
    let seeds = tape.matmul(input.future_time, wu)?;
    let te = bundle.time_enhanced.vars(tape, store);
    let (hf, _) = time_enhanced_attention(tape, h, seeds, &te, opts)?;
    let ff = bundle.feedforward.vars(tape, store);
    let hidden = feedforward(tape, hf, &ff, opts)?;
    let ow = tape.param(store, bundle.out_w);
    let ob = tape.param(store, bundle.out_b);
    let y = tape.matmul(hidden, ow)?;
    let forecast = tape.add(y, ob)?;
    Ok(ExpertOutput { forecast, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    fn opts() -> BlockOptions {
        BlockOptions { heads: 2, dropout: 0.0, train: false, rho: 0.7 }
    }

    fn attn_params(d: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let mut v: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&[d, d], rng).map(|x| x * 0.5)).collect();
        v.push(Tensor::ones(&[d]));
        v.push(Tensor::zeros(&[d]));
        v
    }

    fn attn_vars(tape: &mut Tape<f64>, p: &[Tensor<f64>]) -> AttentionVars {
        AttentionVars {
            wq: tape.constant(p[0].clone()),
            wk: tape.constant(p[1].clone()),
            wv: tape.constant(p[2].clone()),
            wo: tape.constant(p[3].clone()),
            ln_gain: tape.constant(p[4].clone()),
            ln_bias: tape.constant(p[5].clone()),
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[1, 3, 2, 6], &mut rng));
        let p = attn_vars(&mut tape, &attn_params(6, &mut rng));
        let o = BlockOptions { heads: 4, ..opts() };
        assert!(matches!(temporal_attention(&mut tape, x, &p, &o), Err(Error::Config(_))));
    }

    #[test]
    fn zero_value_projection_reduces_to_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let xt = rand_t(&[1, 4, 3, 4], &mut rng);
        let x = tape.constant(xt);
        let mut params = attn_params(4, &mut rng);
        params[2] = Tensor::zeros(&[4, 4]);
        let p = attn_vars(&mut tape, &params);
        let out = temporal_attention(&mut tape, x, &p, &opts()).unwrap();
        let ln = tape.layer_norm(x, -1).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(ln)) < 1e-12);
    }

    #[test]
    fn single_step_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[1, 1, 2, 4], &mut rng));
        let p = attn_vars(&mut tape, &attn_params(4, &mut rng));
        let by_node = tape.permute(x, &[0, 2, 1, 3]).unwrap();
        let (_, w) = multi_head_attention(&mut tape, by_node, by_node, &p, 2).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn temporal_attention_never_mixes_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = attn_params(4, &mut rng);
        let x = rand_t(&[1, 5, 3, 4], &mut rng);
        let mut y = x.clone();
        for t in 0..5 {
            for c in 0..4 {
                let v = y.get(&[0, t, 1, c]);
                y.set(&[0, t, 1, c], v + 0.7);
            }
        }
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(input.clone());
            let p = attn_vars(&mut tape, &params);
            let o = temporal_attention(&mut tape, xv, &p, &opts()).unwrap();
            tape.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for t in 0..5 {
            for c in 0..4 {
                for n in [0, 2] {
                    assert_eq!(a.get(&[0, t, n, c]), b.get(&[0, t, n, c]));
                }
                assert_ne!(a.get(&[0, t, 1, c]), b.get(&[0, t, 1, c]));
            }
        }
    }

    #[test]
    fn spatial_conv_identity_graph_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let xt = rand_t(&[1, 2, 3, 4], &mut rng);
        let x = tape.constant(xt.clone());
        let a = tape.constant(Tensor::eye(3));
        let w = tape.constant(Tensor::eye(4));
        let out = spatial_conv(&mut tape, x, Some(a), w).unwrap();
        assert_eq!(tape.value(out), &xt.map(|v| v.max(0.0)));
        let skip = spatial_conv(&mut tape, x, None, w).unwrap();
        assert_eq!(tape.value(skip), tape.value(out));
    }

    #[test]
    fn spatial_conv_uniform_graph_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let xt = rand_t(&[1, 1, 3, 2], &mut rng).map(|v| v.abs() + 0.1);
        let x = tape.constant(xt.clone());
        let a = tape.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        let w = tape.constant(Tensor::eye(2));
        let out = spatial_conv(&mut tape, x, Some(a), w).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|n| xt.get(&[0, 0, n, c])).sum::<f64>() / 3.0;
            for n in 0..3 {
                assert!((tape.value(out).get(&[0, 0, n, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_conv_rejects_wrong_graph_size() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
        let a = tape.constant(Tensor::eye(4));
        let w = tape.constant(Tensor::eye(4));
        assert!(matches!(spatial_conv(&mut tape, x, Some(a), w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn spatial_conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_t(&[2, 2, 3, 4], &mut rng);
        let a = crate::adjacency::row_normalize(
            &crate::adjacency::AdjacencyMatrix::new(rand_t(&[3, 3], &mut rng).map(f64::abs)).unwrap(),
        )
        .unwrap();
        let ws = rand_t(&[4, 4], &mut rng);
        let probe = rand_t(&[2, 2, 3, 4], &mut rng);
        let err = finite_difference_check(
            |t, w| {
                let xv = t.constant(x.clone());
                let av = t.constant(a.weights().clone());
                let o = spatial_conv(t, xv, Some(av), w)?;
                let pv = t.constant(probe.clone());
                let p = t.mul(o, pv)?;
                t.sum_all(p)
            },
            &ws,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn time_enhanced_single_history_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let h = tape.constant(rand_t(&[1, 1, 3, 4], &mut rng));
        let f = tape.constant(rand_t(&[1, 5, 4], &mut rng));
        let p = attn_vars(&mut tape, &attn_params(4, &mut rng));
        let (out, w) = time_enhanced_attention(&mut tape, h, f, &p, &opts()).unwrap();
        assert_eq!(tape.shape(out), &[1, 5, 3, 4]);
        assert!(tape.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_enhanced_equal_seeds_equal_rows_and_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let h = tape.constant(rand_t(&[2, 4, 3, 4], &mut rng));
        let mut ft = rand_t(&[2, 3, 4], &mut rng);
        for c in 0..4 {
            let v = ft.get(&[0, 0, c]);
            ft.set(&[0, 2, c], v);
        }
        let f = tape.constant(ft);
        let p = attn_vars(&mut tape, &attn_params(4, &mut rng));
        let (out, w) = time_enhanced_attention(&mut tape, h, f, &p, &opts()).unwrap();
        let o = tape.value(out);
        for n in 0..3 {
            for c in 0..4 {
                assert_eq!(o.get(&[0, 0, n, c]), o.get(&[0, 2, n, c]));
            }
        }
        for row in tape.value(w).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn feedforward_zero_weights_is_layer_norm_and_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let ht = rand_t(&[2, 3, 4], &mut rng);
        let h = tape.constant(ht);
        let p = FeedForwardVars {
            w1: tape.constant(Tensor::zeros(&[4, 16])),
            b1: tape.constant(Tensor::zeros(&[16])),
            w2: tape.constant(Tensor::zeros(&[16, 4])),
            b2: tape.constant(Tensor::zeros(&[4])),
            ln_gain: tape.constant(Tensor::ones(&[4])),
            ln_bias: tape.constant(Tensor::zeros(&[4])),
        };
        let out = feedforward(&mut tape, h, &p, &opts()).unwrap();
        let ln = tape.layer_norm(h, -1).unwrap();
        assert_eq!(tape.shape(out), &[2, 3, 4]);
        assert!(tape.value(out).max_abs_diff(tape.value(ln)) < 1e-15);
    }

    #[test]
    fn feedforward_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = rand_t(&[2, 3, 4], &mut rng);
        let w1 = rand_t(&[4, 16], &mut rng).map(|v| v * 0.5);
        let w2 = rand_t(&[16, 4], &mut rng).map(|v| v * 0.5);
        let probe = rand_t(&[2, 3, 4], &mut rng);
        let err = finite_difference_check(
            |t, w| {
                let hv = t.constant(h.clone());
                let p = FeedForwardVars {
                    w1: w,
                    b1: t.constant(Tensor::full(&[16], 0.1)),
                    w2: t.constant(w2.clone()),
                    b2: t.constant(Tensor::zeros(&[4])),
                    ln_gain: t.constant(Tensor::ones(&[4])),
                    ln_bias: t.constant(Tensor::zeros(&[4])),
                };
                let o = feedforward(t, hv, &p, &opts())?;
                let pv = t.constant(probe.clone());
                let m = t.mul(o, pv)?;
                t.sum_all(m)
            },
            &w1,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn kind_round_trips_through_text() {
        for k in ExpertKind::ALL {
            assert_eq!(k.abbrev().parse::<ExpertKind>().unwrap(), k);
        }
        assert!("xx".parse::<ExpertKind>().is_err());
        let set: ExpertSet = "Id+ad+SS".parse().unwrap();
        assert_eq!(set.to_string(), "Id+Ad+SS");
        assert!("Id+Id".parse::<ExpertSet>().is_err());
        assert!("".parse::<ExpertSet>().is_err());
    }

    #[test]
    fn all_kinds_share_backbone_shapes() {
        let dims = BackboneDims {
            nodes: 3,
            channels: 1,
            d_model: 8,
            heads: 2,
            d_time: 4,
            layers: 1,
            adaptive_dim: 3,
            edge_hidden: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut shapes = Vec::new();
        for kind in ExpertKind::ALL {
            let mut store = ParamStore::<f64>::new();
            ExpertBundle::register(&mut store, "e", kind, &dims, &mut rng).unwrap();
            let backbone: Vec<(String, Vec<usize>)> = store
                .iter()
                .filter(|(_, name, _)| !name.contains(".graph."))
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
                .collect();
            shapes.push(backbone);
        }
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    }
}
