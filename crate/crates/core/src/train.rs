//! Training configuration, window batching, the optimisation loop with
//! early stopping, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::AdjacencyMatrix;
use crate::data::TrafficSeries;
use crate::error::{Error, Result};
use crate::expert::ExpertSet;
use crate::gating::FusionMode;
use crate::metrics::{metrics, MetricsReport};
use crate::model::{Batch, MixtureModel, ModelConfig};
use crate::normalize::{chronological_split, window_starts, SplitRanges, ZScoreStats};
use crate::optim::Adam;
use crate::tape::Tape;
use crate::temporal::time_index;
use crate::tensor::Tensor;

/// Every tunable of a run; flat so each field is addressable from a
/// config file or the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub experts: ExpertSet,
    pub history: usize,
    pub horizon: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub route_weight: f64,
    pub fusion: FusionMode,
    pub seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub d_time: usize,
    pub layers: usize,
    pub adaptive_dim: usize,
    pub edge_hidden: usize,
    pub rho: f64,
    /// Use every n-th training window per epoch.
    pub train_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            experts: ExpertSet::full(),
            history: 12,
            horizon: 12,
            batch_size: 64,
            dropout: 0.2,
            lr: 0.001,
            patience: 15,
            max_epochs: 100,
            route_weight: 0.1,
            fusion: FusionMode::Weighted,
            seed: 0,
            d_model: 32,
            heads: 4,
            d_time: 8,
            layers: 1,
            adaptive_dim: 10,
            edge_hidden: 16,
            rho: 0.7,
            train_stride: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "experts",
        "history",
        "horizon",
        "batch_size",
        "dropout",
        "lr",
        "patience",
        "max_epochs",
        "route_weight",
        "fusion",
        "seed",
        "d_model",
        "heads",
        "d_time",
        "layers",
        "adaptive_dim",
        "edge_hidden",
        "rho",
        "train_stride",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("history", self.history),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("train_stride", self.train_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if !(self.route_weight >= 0.0 && self.route_weight.is_finite()) {
            return Err(Error::Config(format!("route_weight must be non-negative, got {}", self.route_weight)));
        }
        self.model_config(1, 1).validate()
    }

    pub fn model_config(&self, nodes: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            experts: self.experts.kinds().to_vec(),
            nodes,
            channels,
            history: self.history,
            horizon: self.horizon,
            d_model: self.d_model,
            heads: self.heads,
            d_time: self.d_time,
            layers: self.layers,
            adaptive_dim: self.adaptive_dim,
            edge_hidden: self.edge_hidden,
            rho: self.rho,
            dropout: self.dropout,
        }
    }
}

/// Normalised series, time indices and split ranges for one dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: Tensor<f64>,
    pub normalized: Tensor<f64>,
    pub tau: Vec<f64>,
    pub stats: ZScoreStats,
    pub splits: SplitRanges,
    pub history: usize,
    pub horizon: usize,
}

impl PreparedData {
    /// Splits the series and fits normalisation on the training part only.
    pub fn new(series: &TrafficSeries, history: usize, horizon: usize) -> Result<Self> {
        let splits = chronological_split(series.steps(), history, horizon)?;
        let per = series.nodes() * series.channels();
        let train_vals = Tensor::new(
            vec![splits.train.len(), series.nodes(), series.channels()],
            series.values().data()[splits.train.start * per..splits.train.end * per].to_vec(),
        )?;
        let stats = ZScoreStats::fit(&train_vals)?;
        Self::with_stats(series, history, horizon, stats)
    }

    /// Uses previously fitted statistics.
    pub fn with_stats(series: &TrafficSeries, history: usize, horizon: usize, stats: ZScoreStats) -> Result<Self> {
        let splits = chronological_split(series.steps(), history, horizon)?;
        let origin = series.timestamps()[0];
        let tau = series.timestamps().iter().map(|&t| time_index(t, origin)).collect();
        Ok(PreparedData {
            raw: series.values().clone(),
            normalized: stats.apply(series.values())?,
            tau,
            stats,
            splits,
            history,
            horizon,
        })
    }

    pub fn nodes(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn train_starts(&self, stride: usize) -> Vec<usize> {
        window_starts(&self.splits.train, self.history, self.horizon, stride)
    }

    pub fn val_starts(&self) -> Vec<usize> {
        window_starts(&self.splits.val, self.history, self.horizon, 1)
    }

    pub fn test_starts(&self) -> Vec<usize> {
        window_starts(&self.splits.test, self.history, self.horizon, 1)
    }

    fn frames(&self, source: &Tensor<f64>, starts: &[usize], offset: usize, len: usize) -> Result<Tensor<f64>> {
        let per = self.nodes() * self.channels();
        let mut out = Vec::with_capacity(starts.len() * len * per);
        for &s in starts {
            let a = (s + offset) * per;
            out.extend_from_slice(&source.data()[a..a + len * per]);
        }
        Tensor::new(vec![starts.len(), len, self.nodes(), self.channels()], out)
    }

    fn taus(&self, starts: &[usize], offset: usize, len: usize) -> Result<Tensor<f64>> {
        let mut out = Vec::with_capacity(starts.len() * len);
        for &s in starts {
            out.extend_from_slice(&self.tau[s + offset..s + offset + len]);
        }
        Tensor::new(vec![starts.len(), len], out)
    }

    /// Model input and normalised target for windows beginning at `starts`.
    pub fn batch(&self, starts: &[usize]) -> Result<(Batch<f64>, Tensor<f64>)> {
        let (h, f) = (self.history, self.horizon);
        let batch = Batch {
            x: self.frames(&self.normalized, starts, 0, h)?,
            tau_history: self.taus(starts, 0, h)?,
            tau_future: self.taus(starts, h, f)?,
        };
        Ok((batch, self.frames(&self.normalized, starts, h, f)?))
    }

    /// Un-normalised inputs `[B, T', N, C]`.
    pub fn raw_history(&self, starts: &[usize]) -> Result<Tensor<f64>> {
        self.frames(&self.raw, starts, 0, self.history)
    }

    /// Un-normalised targets `[B, T, N, C]`.
    pub fn raw_target(&self, starts: &[usize]) -> Result<Tensor<f64>> {
        self.frames(&self.raw, starts, self.history, self.horizon)
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MixtureModel<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Builds a model sized for `data` from `cfg`.
pub fn build_model(cfg: &TrainConfig, data: &PreparedData, graph: Option<&AdjacencyMatrix<f64>>) -> Result<MixtureModel<f64>> {
    cfg.validate()?;
    MixtureModel::new(cfg.model_config(data.nodes(), data.channels()), graph, cfg.seed)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Minimises the forecast loss with Adam, evaluating validation MAE after
/// every epoch. Stops once `patience` consecutive epochs fail to improve
/// and returns the best-validation parameters.
pub fn train(
    mut model: MixtureModel<f64>,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut starts = data.train_starts(cfg.train_stride);
    let val = data.val_starts();
    if starts.is_empty() || val.is_empty() {
        return Err(Error::Input("no complete windows in the training or validation split".into()));
    }
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut shuffle = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
    let mut best: Option<(f64, usize, crate::params::ParamStore<f64>)> = None;
    let mut history = Vec::new();
    let mut wait = 0;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        starts.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (b, chunk) in starts.chunks(cfg.batch_size).enumerate() {
            let (batch, target) = data.batch(chunk)?;
            let mut tape = Tape::with_seed(mix(cfg.seed, epoch as u64, b as u64 + 1));
            let pass = model.forward(&mut tape, &batch, true, FusionMode::Weighted)?;
            let terms = model.loss(&mut tape, &pass, &target, cfg.route_weight)?;
            let loss = tape.value(terms.total).item()?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at epoch {epoch}, batch {}", b + 1)));
            }
            let grads = tape.backward(terms.total, model.params())?;
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, batch {}", b + 1)));
            }
            opt.step(model.params_mut(), &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let report = evaluate(&model, data, &val, FusionMode::Weighted, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / starts.len() as f64,
            val_mae: report.mae,
            val_rmse: report.rmse,
            val_mape: report.mape,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        let improved = best.as_ref().map_or(true, |(b, _, _)| report.mae < *b);
        if improved {
            best = Some((report.mae, epoch, model.params().clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Normalised fused forecasts `[W, T, N, C]` and routing weights `[W, M]`.
pub fn predict_windows(
    model: &MixtureModel<f64>,
    data: &PreparedData,
    starts: &[usize],
    fusion: FusionMode,
    batch_size: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut fused = Vec::new();
    let mut alpha = Vec::new();
    for chunk in starts.chunks(batch_size.max(1)) {
        let (batch, _) = data.batch(chunk)?;
        let p = model.predict(&batch, fusion)?;
        fused.extend_from_slice(p.fused.data());
        alpha.extend_from_slice(p.alpha.data());
    }
    let c = model.config();
    Ok((
        Tensor::new(vec![starts.len(), c.horizon, c.nodes, c.channels], fused)?,
        Tensor::new(vec![starts.len(), c.experts.len()], alpha)?,
    ))
}

/// Metrics in original units over the given windows.
pub fn evaluate(
    model: &MixtureModel<f64>,
    data: &PreparedData,
    starts: &[usize],
    fusion: FusionMode,
    batch_size: usize,
) -> Result<MetricsReport> {
    let (pred, _) = predict_windows(model, data, starts, fusion, batch_size)?;
    metrics(&data.stats.invert(&pred)?, &data.raw_target(starts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertKind;
    use crate::synthetic::{generate_synthetic, SyntheticParams};

    fn tiny() -> (PreparedData, AdjacencyMatrix<f64>, TrainConfig) {
        let d = generate_synthetic(&SyntheticParams { nodes: 4, steps: 400, period: 48, ..Default::default() }).unwrap();
        let cfg = TrainConfig {
            experts: ExpertSet::new(vec![ExpertKind::Identity, ExpertKind::SpatioSemantic]).unwrap(),
            history: 4,
            horizon: 3,
            batch_size: 16,
            d_model: 8,
            heads: 2,
            d_time: 4,
            max_epochs: 3,
            train_stride: 4,
            ..Default::default()
        };
        let data = PreparedData::new(&d.series, cfg.history, cfg.horizon).unwrap();
        (data, d.graph, cfg)
    }

    #[test]
    fn batches_line_up_with_series() {
        let (data, _, cfg) = tiny();
        let starts = [0usize, 7];
        let (batch, target) = data.batch(&starts).unwrap();
        assert_eq!(batch.x.shape(), &[2, 4, 4, 1]);
        assert_eq!(target.shape(), &[2, 3, 4, 1]);
        assert_eq!(batch.x.get(&[1, 0, 2, 0]), data.normalized.get(&[7, 2, 0]));
        assert_eq!(target.get(&[1, 0, 2, 0]), data.normalized.get(&[7 + cfg.history, 2, 0]));
        assert_eq!(batch.tau_future.get(&[1, 0]), data.tau[7 + cfg.history]);
    }

    #[test]
    fn normalisation_uses_training_split_only() {
        let (data, _, _) = tiny();
        let train = &data.raw.data()[data.splits.train.start * 4..data.splits.train.end * 4];
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        assert!((data.stats.mean[0] - mean).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_flat_validation() {
        let (data, graph, mut cfg) = tiny();
        cfg.lr = 0.0;
        cfg.patience = 5;
        let model = build_model(&cfg, &data, Some(&graph)).unwrap();
        let before = model.params().clone();
        let out = train(model, &data, &cfg, |_| {}).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.history.windows(2).all(|w| w[0].val_mae == w[1].val_mae));
        for ((_, _, a), (_, _, b)) in before.iter().zip(out.model.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_patience_stops_after_first_non_improving_epoch() {
        let (data, graph, mut cfg) = tiny();
        cfg.lr = 0.0;
        cfg.patience = 0;
        let model = build_model(&cfg, &data, Some(&graph)).unwrap();
        let out = train(model, &data, &cfg, |_| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (data, graph, cfg) = tiny();
        let run = || {
            let model = build_model(&cfg, &data, Some(&graph)).unwrap();
            train(model, &data, &cfg, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.train_loss, r.val_mae, r.val_rmse)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig { heads: 3, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
