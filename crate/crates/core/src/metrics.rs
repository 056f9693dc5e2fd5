//! Forecast error metrics and the persistence yardstick.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::ZScoreStats;
use crate::tensor::Tensor;

/// Truth values with `|y|` below this are left out of MAPE.
pub const MAPE_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; NaN when every entry was masked.
    pub mape: f64,
    pub mape_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Entries that entered the MAPE average.
    pub mape_count: usize,
    pub per_horizon: Vec<HorizonMetrics>,
    pub inference_seconds: Option<f64>,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    pct_n: usize,
}

impl Acc {
    fn push(&mut self, p: f64, y: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() >= MAPE_EPS {
            self.pct += e.abs() / y.abs();
            self.pct_n += 1;
        }
    }

    fn finish(&self) -> (f64, f64, f64, usize) {
        let n = self.n.max(1) as f64;
        let mape = if self.pct_n == 0 { f64::NAN } else { 100.0 * self.pct / self.pct_n as f64 };
        (self.abs / n, (self.sq / n).sqrt(), mape, self.pct_n)
    }
}

/// MAE, RMSE and MAPE in the units of the inputs. Axis 1 of inputs with
/// two or more axes is the horizon; 1-D inputs count as a single step.
pub fn metrics(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim("metrics", &[pred.shape(), truth.shape()]));
    }
    if pred.is_empty() {
        return Err(Error::Input("no values to score".into()));
    }
    let s = pred.shape();
    let (outer, steps) = if s.len() >= 2 { (s[0], s[1]) } else { (1, 1) };
    let inner = pred.len() / (outer * steps);
    let mut total = Acc::default();
    let mut per: Vec<Acc> = (0..steps).map(|_| Acc::default()).collect();
    for (i, (&p, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
        let step = (i / inner) % steps;
        total.push(p, y);
        per[step].push(p, y);
    }
    let (mae, rmse, mape, mape_count) = total.finish();
    let per_horizon = per
        .iter()
        .enumerate()
        .map(|(step, a)| {
            let (mae, rmse, mape, mape_count) = a.finish();
            HorizonMetrics { step: step + 1, mae, rmse, mape, mape_count }
        })
        .collect();
    Ok(MetricsReport { mae, rmse, mape, mape_count, per_horizon, inference_seconds: None })
}

/// Metrics in original units for normalised predictions and targets.
pub fn compute_metrics(pred: &Tensor<f64>, truth: &Tensor<f64>, stats: &ZScoreStats) -> Result<MetricsReport> {
    metrics(&stats.invert(pred)?, &stats.invert(truth)?)
}

/// Repeats the last frame of each `[.., T', N, C]` window for `horizon` steps.
pub fn persistence_baseline(window: &Tensor<f64>, horizon: usize) -> Result<Tensor<f64>> {
    let s = window.shape();
    if s.len() < 3 || s[s.len() - 3] == 0 {
        return Err(Error::dim("persistence_baseline", &[s]));
    }
    let k = s.len() - 3;
    let (steps, frame) = (s[k], s[k + 1] * s[k + 2]);
    let outer: usize = s[..k].iter().product();
    let mut out = Vec::with_capacity(outer * horizon * frame);
    for o in 0..outer {
        let last = &window.data()[(o * steps + steps - 1) * frame..(o * steps + steps) * frame];
        for _ in 0..horizon {
            out.extend_from_slice(last);
        }
    }
    let mut shape = s.to_vec();
    shape[k] = horizon;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![v.len()], v).unwrap()
    }

    #[test]
    fn hand_values() {
        let r = metrics(&t(&[1.0, 2.0]), &t(&[1.0, 4.0])).unwrap();
        assert_eq!(r.mae, 1.0);
        assert_eq!(r.rmse, 2f64.sqrt());
        assert_eq!(r.mape, 25.0);
        assert_eq!(r.mape_count, 2);
    }

    #[test]
    fn perfect_forecast_is_zero() {
        let r = metrics(&t(&[3.0, -5.0, 7.0]), &t(&[3.0, -5.0, 7.0])).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn fully_masked_mape_is_nan_with_zero_count() {
        let r = metrics(&t(&[0.1, 0.2]), &t(&[0.5, -0.9])).unwrap();
        assert!(r.mape.is_nan());
        assert_eq!(r.mape_count, 0);
    }

    #[test]
    fn constant_error_identity() {
        let truth = Tensor::from_fn(&[2, 3, 4, 1], |i| 10.0 + i as f64);
        let pred = truth.map(|v| v - 0.75);
        let r = metrics(&pred, &truth).unwrap();
        assert_eq!(r.mae, 0.75);
        assert_eq!(r.rmse, 0.75);
        assert_eq!(r.per_horizon.len(), 3);
    }

    #[test]
    fn per_horizon_splits_axis_one() {
        let truth = Tensor::zeros(&[2, 2, 1, 1]);
        let pred = Tensor::from_f64(vec![2, 2, 1, 1], &[1.0, 3.0, 1.0, 3.0]).unwrap();
        let r = metrics(&pred, &truth).unwrap();
        assert_eq!(r.per_horizon[0].mae, 1.0);
        assert_eq!(r.per_horizon[1].mae, 3.0);
        assert_eq!(r.mae, 2.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(metrics(&t(&[1.0]), &t(&[1.0, 2.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn persistence_constant_and_ramp() {
        let c = Tensor::full(&[4, 2, 1], 5.0);
        let p = persistence_baseline(&c, 3).unwrap();
        assert_eq!(p.shape(), &[3, 2, 1]);
        assert!(p.data().iter().all(|&v| v == 5.0));
        // ramp with slope s: future values last + s*h, error s*h, mean s*(T+1)/2
        let s = 0.5;
        let horizon = 6;
        let hist = Tensor::from_fn(&[4, 1, 1], |t| s * t as f64);
        let fut = Tensor::from_fn(&[horizon, 1, 1], |h| s * (4 + h) as f64);
        let r = metrics(&persistence_baseline(&hist, horizon).unwrap(), &fut).unwrap();
        assert!((r.mae - s * (horizon as f64 + 1.0) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let r = metrics(&t(&p), &t(&y)).unwrap();
            prop_assert!(r.rmse + 1e-12 >= r.mae);
            prop_assert!(r.mae >= 0.0);
            prop_assert!(r.mape.is_nan() || r.mape >= 0.0);
        }

        #[test]
        fn persistence_matches_last_value_copy(vals in proptest::collection::vec(-9.0f64..9.0, 2 * 5 * 3), horizon in 1usize..5) {
            let w = Tensor::new(vec![2, 5, 3, 1], vals.clone()).unwrap();
            let p = persistence_baseline(&w, horizon).unwrap();
            for b in 0..2 {
                for h in 0..horizon {
                    for n in 0..3 {
                        prop_assert_eq!(p.get(&[b, h, n, 0]), vals[(b * 5 + 4) * 3 + n]);
                    }
                }
            }
        }
    }
}
