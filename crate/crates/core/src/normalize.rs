//! Per-channel z-scoring and chronological splitting.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

impl ZScoreStats {
    /// Fits on values whose last axis is the channel.
    pub fn fit(values: &Tensor<f64>) -> Result<Self> {
        let c = *values.shape().last().ok_or_else(|| Error::Input("cannot fit on a scalar".into()))?;
        if values.is_empty() || c == 0 {
            return Err(Error::Input("cannot fit normalisation on an empty split".into()));
        }
        let rows = values.len() / c;
        let mut mean = vec![0.0; c];
        for row in values.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in values.data().chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let denom = rows.saturating_sub(1).max(1) as f64;
        let std = var.iter().map(|s| (s / denom).sqrt().max(STD_FLOOR)).collect();
        Ok(ZScoreStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        ZScoreStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    fn check(&self, x: &Tensor<f64>) -> Result<usize> {
        let c = self.mean.len();
        if x.shape().last() != Some(&c) {
            return Err(Error::dim("zscore", &[x.shape(), &[c]]));
        }
        Ok(c)
    }

    pub fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let c = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let c = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        Ok(out)
    }
}

/// Step ranges of the 70/10/20 chronological split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

fn split_lengths(steps: usize) -> (usize, usize, usize) {
    let train = steps * 7 / 10;
    let val = steps / 10;
    (train, val, steps - train - val)
}

/// Splits `steps` into contiguous train/validation/test ranges; each must
/// hold at least one full window of `history + horizon` steps.
pub fn chronological_split(steps: usize, history: usize, horizon: usize) -> Result<SplitRanges> {
    let need = history + horizon;
    let (a, b, c) = split_lengths(steps);
    if a.min(b).min(c) < need {
        let minimum = (need..).find(|&s| {
            let (x, y, z) = split_lengths(s);
            x.min(y).min(z) >= need
        });
        return Err(Error::Input(format!(
            "series of {steps} steps is too short: every split needs {need} steps, so at least {} steps are required",
            minimum.unwrap_or(usize::MAX)
        )));
    }
    Ok(SplitRanges { train: 0..a, val: a..a + b, test: a + b..steps })
}

/// First steps of all windows inside `range`, every `stride`-th one.
pub fn window_starts(range: &Range<usize>, history: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let span = history + horizon;
    if range.len() < span {
        return Vec::new();
    }
    (range.start..=range.end - span).step_by(stride.max(1)).collect()
}
