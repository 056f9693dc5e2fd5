//! Mixture-of-experts forecaster: shared time embedding and input
//! projection, a pool of experts, and the memory router.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::{similarity_matrix, AdjacencyMatrix};
use crate::error::{Error, Result};
use crate::expert::{run_expert, BackboneDims, BlockOptions, ExpertBundle, ExpertInput, ExpertKind};
use crate::gating::{
    fuse_tape, memory_query_tape, oracle_labels, routing_loss_tape, routing_weights_tape, FusionMode,
};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::temporal::{embed_tape, time2vec_tape};
use crate::tensor::Tensor;

/// Shortest period, in days, among the initial periodic time features
/// (four five-minute steps).
const FINEST_PERIOD_DAYS: f64 = 4.0 / 288.0;

/// Component 0 is the slow linear trend. Periodic components start on a
/// geometric ladder of periods from one day down to [`FINEST_PERIOD_DAYS`].
fn initial_frequency(i: usize, d_time: usize, rng: &mut impl Rng) -> f64 {
    if i == 0 {
        return rng.gen_range(0.0..0.1);
    }
    let rungs = d_time.saturating_sub(2).max(1) as f64;
    let period = FINEST_PERIOD_DAYS.powf((i - 1) as f64 / rungs);
    std::f64::consts::TAU / period
}

/// Architecture of a model; everything needed to rebuild its parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub experts: Vec<ExpertKind>,
    pub nodes: usize,
    pub channels: usize,
    pub history: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_time: usize,
    pub layers: usize,
    pub adaptive_dim: usize,
    pub edge_hidden: usize,
    pub rho: f64,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            nodes: self.nodes,
            channels: self.channels,
            d_model: self.d_model,
            heads: self.heads,
            d_time: self.d_time,
            layers: self.layers,
            adaptive_dim: self.adaptive_dim,
            edge_hidden: self.edge_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Config("at least one expert is required".into()));
        }
        for (i, k) in self.experts.iter().enumerate() {
            if self.experts[..i].contains(k) {
                return Err(Error::Config(format!("expert {k} listed twice")));
            }
        }
        if self.history == 0 || self.horizon == 0 {
            return Err(Error::Config("history and horizon must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.dims().validate()
    }

    pub fn uses(&self, kind: ExpertKind) -> bool {
        self.experts.contains(&kind)
    }
}

/// One batch of normalised windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `[B, T', N, C]`.
    pub x: Tensor<T>,
    /// Time indices of the history steps `[B, T']`.
    pub tau_history: Tensor<T>,
    /// Time indices of the forecast steps `[B, T]`.
    pub tau_future: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embedded: Var,
    pub expert_forecasts: Vec<Var>,
    /// Routing weights `[B, M]`.
    pub alpha: Var,
    pub fused: Var,
}

/// Detached forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// `[B, T, N, C]` in normalised units.
    pub fused: Tensor<T>,
    pub alpha: Tensor<T>,
    pub experts: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub forecast: Var,
    pub routing: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MixtureModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    time_w: ParamId,
    time_phi: ParamId,
    proj: ParamId,
    experts: Vec<ExpertBundle>,
    gate_query: ParamId,
    gate_keys: ParamId,
    link_bits: Option<Tensor<T>>,
}

impl<T: Scalar> MixtureModel<T> {
    /// Builds a freshly initialised model. `static_graph` supplies the road
    /// links used by the semantic expert.
    pub fn new(config: ModelConfig, static_graph: Option<&AdjacencyMatrix<T>>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(g) = static_graph {
            if g.n() != config.nodes {
                return Err(Error::dim("static_graph", &[&[g.n(), g.n()], &[config.nodes]]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dt = config.d_time;
        let two_pi = std::f64::consts::TAU;
        let w = Tensor::from_fn(&[dt], |i| T::lit(initial_frequency(i, dt, &mut rng)));
        let phi = Tensor::from_fn(&[dt], |_| T::lit(rng.gen_range(0.0..two_pi)));
        let time_w = store.add("time.w", w);
        let time_phi = store.add("time.phi", phi);
        let d = config.d_model;
        let fan = config.channels + dt;
        let limit = (6.0 / (fan + d) as f64).sqrt();
        let proj = store.add(
            "embed.proj",
            Tensor::from_fn(&[d, fan], |_| T::lit(rng.gen_range(-limit..limit))),
        );
        let dims = config.dims();
        let mut experts = Vec::with_capacity(config.experts.len());
        for (i, &kind) in config.experts.iter().enumerate() {
            let prefix = format!("expert{i}_{}", kind.abbrev());
            experts.push(ExpertBundle::register(&mut store, &prefix, kind, &dims, &mut rng)?);
        }
        let gate_query = store.add_glorot("gate.query", d, d, &mut rng);
        let m = config.experts.len();
        let gate_keys = store.add(
            "gate.keys",
            Tensor::from_fn(&[m, d], |_| T::lit(rng.gen_range(-1.0..1.0) / (d as f64).sqrt())),
        );
        Ok(MixtureModel {
            config,
            store,
            time_w,
            time_phi,
            proj,
            experts,
            gate_query,
            gate_keys,
            link_bits: static_graph.map(AdjacencyMatrix::link_bits),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn link_bits(&self) -> Option<&Tensor<T>> {
        self.link_bits.as_ref()
    }

    /// Replaces the road-link indicator matrix used by the semantic expert.
    pub fn set_link_bits(&mut self, bits: Option<Tensor<T>>) -> Result<()> {
        if let Some(b) = &bits {
            let n = self.config.nodes;
            if b.shape() != [n, n] {
                return Err(Error::dim("set_link_bits", &[b.shape(), &[n, n]]));
            }
        }
        self.link_bits = bits;
        Ok(())
    }

    pub fn expert_kinds(&self) -> &[ExpertKind] {
        &self.config.experts
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        let b = batch.len();
        let want = [b, c.history, c.nodes, c.channels];
        if batch.x.shape() != want
            || batch.tau_history.shape() != [b, c.history]
            || batch.tau_future.shape() != [b, c.horizon]
        {
            return Err(Error::dim(
                "model_input",
                &[batch.x.shape(), batch.tau_history.shape(), batch.tau_future.shape(), &want],
            ));
        }
        Ok(())
    }

    /// Pairwise cosine similarity of node trajectories in each window, `[B, N, N]`.
    pub fn window_similarity(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let per_node = x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])?;
        similarity_matrix(&per_node)
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>, train: bool, fusion: FusionMode) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let w = tape.param(&self.store, self.time_w);
        let phi = tape.param(&self.store, self.time_phi);
        let tau_h = tape.constant(batch.tau_history.clone());
        let tau_f = tape.constant(batch.tau_future.clone());
        let tim_h = time2vec_tape(tape, tau_h, w, phi)?;
        let tim_f = time2vec_tape(tape, tau_f, w, phi)?;
        let x = tape.constant(batch.x.clone());
        let proj = tape.param(&self.store, self.proj);
        let embedded = embed_tape(tape, x, tim_h, proj)?;

        let (link_bits, similarity) = if self.config.uses(ExpertKind::SpatioSemantic) {
            let bits = self.link_bits.as_ref().map(|b| tape.constant(b.clone()));
            let sims = self.window_similarity(&batch.x)?;
            (bits, Some(tape.constant(sims)))
        } else {
            (None, None)
        };
        let input = ExpertInput { hidden: embedded, future_time: tim_f, link_bits, similarity };
        let opts = BlockOptions {
            heads: self.config.heads,
            dropout: self.config.dropout,
            train,
            rho: self.config.rho,
        };
        let mut expert_forecasts = Vec::with_capacity(self.experts.len());
        for bundle in &self.experts {
            expert_forecasts.push(run_expert(tape, &self.store, bundle, &input, &opts)?.forecast);
        }
        let wq = tape.param(&self.store, self.gate_query);
        let keys = tape.param(&self.store, self.gate_keys);
        let q = memory_query_tape(tape, embedded, wq)?;
        let alpha = routing_weights_tape(tape, q, keys)?;
        let fused = fuse_tape(tape, alpha, &expert_forecasts, fusion)?;
        Ok(ForwardPass { embedded, expert_forecasts, alpha, fused })
    }

    /// MAE of the fused forecast plus `route_weight` times the routing loss
    /// against per-sample best-expert labels.
    pub fn loss(&self, tape: &mut Tape<T>, pass: &ForwardPass, target: &Tensor<T>, route_weight: f64) -> Result<LossTerms> {
        if tape.shape(pass.fused) != target.shape() {
            return Err(Error::dim("loss", &[tape.shape(pass.fused), target.shape()]));
        }
        let y = tape.constant(target.clone());
        let diff = tape.sub(pass.fused, y)?;
        let abs = tape.abs(diff);
        let forecast = tape.mean_all(abs)?;
        if route_weight == 0.0 || pass.expert_forecasts.len() < 2 {
            return Ok(LossTerms { total: forecast, forecast, routing: None });
        }
        let outs: Vec<&Tensor<T>> = pass.expert_forecasts.iter().map(|&v| tape.value(v)).collect();
        let labels = oracle_labels(&outs, target)?;
        let routing = routing_loss_tape(tape, pass.alpha, &labels)?;
        let weighted = tape.scale(routing, T::lit(route_weight));
        let total = tape.add(forecast, weighted)?;
        Ok(LossTerms { total, forecast, routing: Some(routing) })
    }

    /// Inference-only forward pass.
    pub fn predict(&self, batch: &Batch<T>, fusion: FusionMode) -> Result<Prediction<T>> {
        let mut tape = Tape::inference();
        let pass = self.forward(&mut tape, batch, false, fusion)?;
        Ok(Prediction {
            fused: tape.value(pass.fused).clone(),
            alpha: tape.value(pass.alpha).clone(),
            experts: pass.expert_forecasts.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}
