//! Seeded synthetic traffic on a ring road.
//!
//! Each node carries a daily sinusoid plus a deviation process. The
//! deviation follows an AR(1) recursion pulled toward the mean deviation
//! of the ring neighbours, driven by Gaussian innovations and by incident
//! drops that recover exponentially.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adjacency::{load_static_graph, AdjacencyMatrix, Edge};
use crate::data::TrafficSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Seconds between steps.
    pub interval: i64,
    /// First timestamp, epoch seconds.
    pub start: i64,
    /// Steps per daily cycle.
    pub period: usize,
    pub base: f64,
    pub amplitude: f64,
    /// AR(1) coefficient of a node's own deviation.
    pub persistence: f64,
    /// Weight on the neighbours' mean deviation.
    pub coupling: f64,
    /// Innovation scale of the deviation process.
    pub process_std: f64,
    /// Additive measurement noise.
    pub noise_std: f64,
    /// Probability per node and step that an incident starts.
    pub incident_rate: f64,
    pub incident_depth: f64,
    /// Time constant of the exponential recovery, in steps.
    pub recovery_steps: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            nodes: 20,
            steps: 5000,
            seed: 0,
            interval: 300,
            start: 1_704_067_200,
            period: 288,
            base: 60.0,
            amplitude: 25.0,
            persistence: 0.6,
            coupling: 0.3,
            process_std: 1.0,
            noise_std: 1.0,
            incident_rate: 0.0005,
            incident_depth: 25.0,
            recovery_steps: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Clear,
    Incident,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub series: TrafficSeries,
    pub graph: AdjacencyMatrix<f64>,
    /// Per step: whether any node is still more than 10% into an incident drop.
    pub regimes: Vec<Regime>,
}

impl SyntheticData {
    /// Incident if any step of `[start, start + len)` is.
    pub fn window_regime(&self, start: usize, len: usize) -> Regime {
        if self.regimes[start..start + len].contains(&Regime::Incident) {
            Regime::Incident
        } else {
            Regime::Clear
        }
    }
}

/// Bidirectional ring `i <-> i+1 (mod n)` with unit weights.
pub fn ring_graph(n: usize) -> Result<AdjacencyMatrix<f64>> {
    let mut edges = Vec::with_capacity(2 * n);
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            edges.push(Edge { from: i, to: j, weight: 1.0, line: 0 });
            if n > 2 {
                edges.push(Edge { from: j, to: i, weight: 1.0, line: 0 });
            }
        }
    }
    load_static_graph(&edges, n)
}

pub fn generate_synthetic(p: &SyntheticParams) -> Result<SyntheticData> {
    if p.nodes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 nodes".into()));
    }
    if p.steps == 0 || p.period == 0 || p.interval <= 0 {
        return Err(Error::Config("steps, period and interval must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p.incident_rate) || p.noise_std < 0.0 || p.process_std < 0.0 || p.recovery_steps <= 0.0 {
        return Err(Error::Config("incident_rate must lie in [0, 1], noise levels >= 0, recovery_steps > 0".into()));
    }
    let n = p.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let shocks = Normal::new(0.0, p.process_std).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let phase: Vec<f64> = (0..n).map(|i| std::f64::consts::TAU * i as f64 / (4.0 * n as f64)).collect();
    let gain: Vec<f64> = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
    let neighbours: Vec<[usize; 2]> = (0..n).map(|i| [(i + n - 1) % n, (i + 1) % n]).collect();

    let decay = (-1.0 / p.recovery_steps).exp();
    let mut deviation = vec![0.0; n];
    let mut incident = vec![0.0; n];
    let mut values = Vec::with_capacity(p.steps * n);
    let mut regimes = Vec::with_capacity(p.steps);
    let threshold = 0.1 * p.incident_depth;
    for t in 0..p.steps {
        let total: Vec<f64> = deviation.iter().zip(&incident).map(|(d, i)| d - i).collect();
        let mut next = vec![0.0; n];
        for i in 0..n {
            let nb = neighbours[i].iter().map(|&j| total[j]).sum::<f64>() / 2.0;
            let shock = if p.process_std > 0.0 { shocks.sample(&mut rng) } else { 0.0 };
            next[i] = p.persistence * deviation[i] + p.coupling * nb + shock;
        }
        deviation = next;
        for level in incident.iter_mut() {
            *level *= decay;
            if p.incident_rate > 0.0 && rng.gen::<f64>() < p.incident_rate {
                *level += p.incident_depth;
            }
        }
        let active = p.incident_depth > 0.0 && incident.iter().any(|&l| l > threshold);
        regimes.push(if active { Regime::Incident } else { Regime::Clear });
        let angle = std::f64::consts::TAU * (t % p.period) as f64 / p.period as f64;
        for i in 0..n {
            let periodic = p.base + gain[i] * p.amplitude * (angle + phase[i]).sin();
            let measured = if p.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values.push(periodic + deviation[i] - incident[i] + measured);
        }
    }
    let timestamps = (0..p.steps as i64).map(|t| p.start + t * p.interval).collect();
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let series = TrafficSeries::new(timestamps, Tensor::new(vec![p.steps, n, 1], values)?, ids)?;
    Ok(SyntheticData { series, graph: ring_graph(n)?, regimes })
}
