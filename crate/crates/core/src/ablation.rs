//! Expert-subset sweep: trains one model per subset, scores it on the test
//! split and times inference.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjacency::AdjacencyMatrix;
use crate::error::{Error, Result};
use crate::expert::{ExpertKind, ExpertSet};
use crate::gating::FusionMode;
use crate::metrics::MetricsReport;
use crate::model::MixtureModel;
use crate::train::{build_model, evaluate, predict_windows, train, PreparedData, TrainConfig};

pub const TIMING_RUNS: usize = 5;

/// Singles, all pairs, three triples and the full set.
pub fn default_grid() -> Vec<ExpertSet> {
    use ExpertKind::*;
    let rows: [&[ExpertKind]; 14] = [
        &[Identity],
        &[Adaptive],
        &[Attention],
        &[SpatioSemantic],
        &[Identity, Adaptive],
        &[Identity, Attention],
        &[Identity, SpatioSemantic],
        &[Adaptive, Attention],
        &[Adaptive, SpatioSemantic],
        &[Attention, SpatioSemantic],
        &[Identity, Adaptive, SpatioSemantic],
        &[Identity, Attention, SpatioSemantic],
        &[Adaptive, Attention, SpatioSemantic],
        &[Identity, Adaptive, Attention, SpatioSemantic],
    ];
    rows.iter().map(|r| ExpertSet::new(r.to_vec()).expect("grid rows are valid")).collect()
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub subsets: Vec<ExpertSet>,
    /// Shared settings; `experts` is replaced per row.
    pub config: TrainConfig,
    /// Concurrent training cells; 0 means one per available core.
    pub workers: usize,
}

impl AblationSpec {
    pub fn new(config: TrainConfig) -> Self {
        AblationSpec { subsets: default_grid(), config, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experts: ExpertSet,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: Option<MetricsReport>,
    /// Median wall-clock seconds for one pass over the test windows.
    pub inference_seconds: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Median of [`TIMING_RUNS`] timed passes after one warm-up pass.
pub fn measure_inference(model: &MixtureModel<f64>, data: &PreparedData, starts: &[usize], batch_size: usize) -> Result<f64> {
    predict_windows(model, data, starts, FusionMode::Weighted, batch_size)?;
    let mut times = Vec::with_capacity(TIMING_RUNS);
    for _ in 0..TIMING_RUNS {
        let t0 = Instant::now();
        predict_windows(model, data, starts, FusionMode::Weighted, batch_size)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

struct Cell {
    row: AblationRow,
    model: Option<MixtureModel<f64>>,
}

fn run_cell(experts: &ExpertSet, base: &TrainConfig, data: &PreparedData, graph: Option<&AdjacencyMatrix<f64>>) -> Cell {
    let cfg = TrainConfig { experts: experts.clone(), ..base.clone() };
    let mut row = AblationRow {
        experts: experts.clone(),
        seed: cfg.seed,
        best_epoch: 0,
        epochs_run: 0,
        metrics: None,
        inference_seconds: None,
        error: None,
    };
    let result = build_model(&cfg, data, graph)
        .and_then(|m| train(m, data, &cfg, |_| {}))
        .and_then(|out| {
            let report = evaluate(&out.model, data, &data.test_starts(), cfg.fusion, cfg.batch_size)?;
            Ok((out, report))
        });
    match result {
        Ok((out, report)) => {
            row.best_epoch = out.best_epoch;
            row.epochs_run = out.history.len();
            row.metrics = Some(report);
            Cell { row, model: Some(out.model) }
        }
        Err(e) => {
            row.error = Some(e.to_string());
            Cell { row, model: None }
        }
    }
}

/// Trains every subset (in parallel cells, each with its own model and RNG
/// streams), then times inference one row at a time.
pub fn run_ablation(
    spec: &AblationSpec,
    data: &PreparedData,
    graph: Option<&AdjacencyMatrix<f64>>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if spec.subsets.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    spec.config.validate()?;
    let workers = match spec.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(spec.subsets.len());
    let mut cells: Vec<Option<Cell>> = (0..spec.subsets.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, experts) in cells.iter_mut().zip(&spec.subsets) {
            let cell = run_cell(experts, &spec.config, data, graph);
            on_row(&cell.row);
            *slot = Some(cell);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(experts) = spec.subsets.get(i) else { break };
                    let cell = run_cell(experts, &spec.config, data, graph);
                    if tx.send((i, cell)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, cell) in rx {
                on_row(&cell.row);
                cells[i] = Some(cell);
            }
        });
    }

    let test = data.test_starts();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cell = cell.expect("every cell reports");
        if let Some(model) = &cell.model {
            match measure_inference(model, data, &test, spec.config.batch_size) {
                Ok(s) => cell.row.inference_seconds = Some(s),
                Err(e) => cell.row.error = Some(e.to_string()),
            }
        }
        rows.push(cell.row);
    }
    Ok(AblationTable { rows })
}

const COLUMNS: [&str; 4] = ["MAE", "RMSE", "MAPE", "Time(s)"];

impl AblationTable {
    fn column(&self, c: usize) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| match c {
                3 => r.inference_seconds,
                _ => r.metrics.as_ref().map(|m| [m.mae, m.rmse, m.mape][c]),
            })
            .map(|v| v.filter(|x| x.is_finite()))
            .collect()
    }

    /// Per column, the row indices of the best and second-best (lowest)
    /// values. Ties share a rank.
    pub fn ranks(&self) -> [(Vec<usize>, Vec<usize>); 4] {
        std::array::from_fn(|c| {
            let col = self.column(c);
            let mut distinct: Vec<f64> = col.iter().flatten().copied().collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let pick = |k: usize| -> Vec<usize> {
                distinct.get(k).map_or(Vec::new(), |&v| {
                    col.iter().enumerate().filter(|(_, x)| **x == Some(v)).map(|(i, _)| i).collect()
                })
            };
            (pick(0), pick(1))
        })
    }

    /// Aligned text; `*` marks the best value in a column and `+` the second best.
    pub fn to_text(&self) -> String {
        let ranks = self.ranks();
        let cell = |r: usize, c: usize| -> String {
            let v = self.column(c)[r];
            let body = match (c, v) {
                (_, None) => "-".to_string(),
                (2, Some(x)) => format!("{x:.2}%"),
                (3, Some(x)) => format!("{x:.4}"),
                (_, Some(x)) => format!("{x:.4}"),
            };
            let mark = if ranks[c].0.contains(&r) {
                "*"
            } else if ranks[c].1.contains(&r) {
                "+"
            } else {
                " "
            };
            format!("{body}{mark}")
        };
        let width = self.rows.iter().map(|r| r.experts.to_string().len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>5}", "Config", "Seed");
        for h in COLUMNS {
            let _ = write!(out, "  {h:>11}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<width$}  {:>5}", row.experts.to_string(), row.seed);
            for c in 0..COLUMNS.len() {
                let _ = write!(out, "  {:>11}", cell(i, c));
            }
            if let Some(e) = &row.error {
                let _ = write!(out, "  error: {e}");
            }
            out.push('\n');
        }
        out.push_str("* best, + second best\n");
        out
    }

    /// One record per row, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experts,seed,best_epoch,epochs_run,mae,rmse,mape,inference_seconds,error\n");
        let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.rows {
            let m = r.metrics.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.experts,
                r.seed,
                r.best_epoch,
                r.epochs_run,
                num(m.map(|m| m.mae)),
                num(m.map(|m| m.rmse)),
                num(m.map(|m| m.mape)),
                num(r.inference_seconds),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            );
        }
        out
    }

    /// The table with timings removed, for reproducibility comparisons.
    pub fn without_timings(&self) -> AblationTable {
        let mut t = self.clone();
        for r in &mut t.rows {
            r.inference_seconds = None;
        }
        t
    }
}
