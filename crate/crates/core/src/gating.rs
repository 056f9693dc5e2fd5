//! Memory-based router over the expert pool.
//!
//! A query pooled from the embedded input is matched against one learned
//! key per expert; the softmax of the match scores gives the routing
//! weights used to fuse expert forecasts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Added inside the log of the routing loss.
pub const ROUTING_LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Sum of expert forecasts weighted by the routing weights.
    #[default]
    Weighted,
    /// Forecast of the highest-weight expert only.
    Top1,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Weighted => "weighted",
            FusionMode::Top1 => "top1",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weighted" => Ok(FusionMode::Weighted),
            "top1" | "top-1" => Ok(FusionMode::Top1),
            other => Err(Error::Config(format!("unknown fusion mode {other:?} (expected weighted or top1)"))),
        }
    }
}

/// One key per expert plus the query projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    keys: Tensor<T>,
    query_proj: Tensor<T>,
}

impl<T: Scalar> MemoryBank<T> {
    /// `keys` is `[M, d]`, `query_proj` is `[d, d]` applied as `W · x`.
    pub fn new(keys: Tensor<T>, query_proj: Tensor<T>) -> Result<Self> {
        if keys.ndim() != 2 || keys.shape()[0] == 0 {
            return Err(Error::Config("memory bank needs at least one key".into()));
        }
        let d = keys.shape()[1];
        if query_proj.shape() != [d, d] {
            return Err(Error::dim("memory_bank", &[keys.shape(), query_proj.shape()]));
        }
        Ok(MemoryBank { keys, query_proj })
    }

    pub fn keys(&self) -> &Tensor<T> {
        &self.keys
    }

    pub fn query_proj(&self) -> &Tensor<T> {
        &self.query_proj
    }

    pub fn experts(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.keys.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    pub weights: Vec<T>,
    pub chosen: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `W_q · mean_{t,n} X'` for an embedded window `[T', N, d]`.
pub fn memory_query<T: Scalar>(embedded: &Tensor<T>, bank: &MemoryBank<T>) -> Result<Vec<T>> {
    let s = embedded.shape();
    let d = bank.width();
    if s.len() != 3 || s[2] != d {
        return Err(Error::dim("memory_query", &[s, bank.keys.shape()]));
    }
    let count = s[0] * s[1];
    let mut pooled = vec![T::zero(); d];
    for row in embedded.data().chunks(d) {
        for (p, &x) in pooled.iter_mut().zip(row) {
            *p += x;
        }
    }
    for p in &mut pooled {
        *p /= T::lit(count as f64);
    }
    let w = bank.query_proj.data();
    Ok((0..d)
        .map(|i| (0..d).map(|j| w[i * d + j] * pooled[j]).sum())
        .collect())
}

/// Softmax of query-key scores.
pub fn routing_weights<T: Scalar>(query: &[T], bank: &MemoryBank<T>) -> Result<RoutingDecision<T>> {
    let d = bank.width();
    if query.len() != d {
        return Err(Error::dim("routing_weights", &[&[query.len()], bank.keys.shape()]));
    }
    let scores: Vec<T> = bank
        .keys
        .data()
        .chunks(d)
        .map(|k| k.iter().zip(query).map(|(&a, &b)| a * b).sum())
        .collect();
    let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let ex: Vec<T> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let total: T = ex.iter().copied().sum();
    let weights: Vec<T> = ex.into_iter().map(|e| e / total).collect();
    Ok(RoutingDecision { chosen: argmax(&weights), weights })
}

fn check_outputs<T: Scalar>(outputs: &[Tensor<T>], experts: usize) -> Result<()> {
    if outputs.len() != experts {
        return Err(Error::Contract(format!(
            "{} expert outputs for {experts} routing weights",
            outputs.len()
        )));
    }
    if let Some(first) = outputs.first() {
        if let Some(bad) = outputs.iter().find(|o| o.shape() != first.shape()) {
            return Err(Error::Contract(format!(
                "expert output shapes differ: {:?} vs {:?}",
                first.shape(),
                bad.shape()
            )));
        }
    }
    Ok(())
}

/// Combines per-expert forecasts for a single sample.
pub fn fuse_outputs<T: Scalar>(
    decision: &RoutingDecision<T>,
    outputs: &[Tensor<T>],
    mode: FusionMode,
) -> Result<Tensor<T>> {
    check_outputs(outputs, decision.weights.len())?;
    match mode {
        FusionMode::Top1 => Ok(outputs[decision.chosen].clone()),
        FusionMode::Weighted => {
            let mut acc = outputs[0].map(|v| v * decision.weights[0]);
            for (o, &w) in outputs.iter().zip(&decision.weights).skip(1) {
                for (a, &v) in acc.data_mut().iter_mut().zip(o.data()) {
                    *a += w * v;
                }
            }
            Ok(acc)
        }
    }
}

/// Index of the expert with the lowest mean absolute error against `target`.
pub fn oracle_expert_label<T: Scalar>(outputs: &[Tensor<T>], target: &Tensor<T>) -> Result<usize> {
    if outputs.is_empty() {
        return Err(Error::Config("no experts to label".into()));
    }
    check_outputs(outputs, outputs.len())?;
    if outputs[0].shape() != target.shape() {
        return Err(Error::dim("oracle_expert_label", &[outputs[0].shape(), target.shape()]));
    }
    let errs: Vec<T> = outputs
        .iter()
        .map(|o| o.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum())
        .collect();
    Ok(argmin(&errs))
}

fn argmin<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `-log(alpha[label] + eps)`.
pub fn routing_loss<T: Scalar>(decision: &RoutingDecision<T>, label: usize) -> Result<T> {
    let w = decision
        .weights
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} out of range for {} experts", decision.weights.len())))?;
    Ok(-(*w + T::lit(ROUTING_LOG_EPS)).ln())
}

/// Query `[B, d]` pooled over steps and nodes of `[B, T', N, d]`.
pub fn memory_query_tape<T: Scalar>(tape: &mut Tape<T>, embedded: Var, query_proj: Var) -> Result<Var> {
    let s = tape.shape(embedded).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("memory_query", &[&s]));
    }
    let flat = tape.reshape(embedded, &[s[0], s[1] * s[2], s[3]])?;
    let pooled = tape.mean(flat, 1)?;
    let wt = tape.transpose(query_proj)?;
    tape.matmul(pooled, wt)
}

/// Routing weights `[B, M]` from queries `[B, d]` and keys `[M, d]`.
pub fn routing_weights_tape<T: Scalar>(tape: &mut Tape<T>, query: Var, keys: Var) -> Result<Var> {
    if tape.shape(keys)[0] == 0 {
        return Err(Error::Config("memory bank needs at least one key".into()));
    }
    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(query, kt)?;
    tape.softmax(scores, -1)
}

/// Per-sample argmax of routing weights `[B, M]`.
pub fn chosen_experts<T: Scalar>(alpha: &Tensor<T>) -> Vec<usize> {
    let m = alpha.shape()[1];
    alpha.data().chunks(m).map(argmax).collect()
}

/// Fuses expert forecasts `[B, ..]` with routing weights `[B, M]`.
///
/// Top-1 multiplies the chosen forecast by `alpha / detach(alpha)`, which
/// is exactly one in value but routes gradient into the router.
pub fn fuse_tape<T: Scalar>(tape: &mut Tape<T>, alpha: Var, outputs: &[Var], mode: FusionMode) -> Result<Var> {
    let a_shape = tape.shape(alpha).to_vec();
    if a_shape.len() != 2 || outputs.len() != a_shape[1] {
        return Err(Error::Contract(format!(
            "{} expert outputs for routing weights of shape {a_shape:?}",
            outputs.len()
        )));
    }
    let (b, m) = (a_shape[0], a_shape[1]);
    let out_shape = tape.shape(outputs[0]).to_vec();
    for &o in outputs {
        if tape.shape(o) != out_shape.as_slice() {
            return Err(Error::Contract(format!(
                "expert output shapes differ: {:?} vs {:?}",
                out_shape,
                tape.shape(o)
            )));
        }
    }
    if out_shape.first() != Some(&b) {
        return Err(Error::dim("fuse", &[&a_shape, &out_shape]));
    }
    let mut wshape = vec![1; out_shape.len()];
    wshape[0] = b;
    match mode {
        FusionMode::Weighted => {
            let mut acc: Option<Var> = None;
            for (i, &o) in outputs.iter().enumerate() {
                let w = tape.gather(alpha, 1, &[i])?;
                let w = tape.reshape(w, &wshape)?;
                let term = tape.mul(o, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("at least one expert"))
        }
        FusionMode::Top1 => {
            let chosen = chosen_experts(tape.value(alpha));
            let per: usize = out_shape[1..].iter().product();
            let mut stacked = Vec::with_capacity(m);
            for &o in outputs {
                stacked.push(tape.reshape(o, &[b, 1, per])?);
            }
            let stacked = tape.concat(&stacked, 1)?;
            let flat = tape.reshape(stacked, &[b * m, per])?;
            let rows: Vec<usize> = chosen.iter().enumerate().map(|(s, &c)| s * m + c).collect();
            let picked = tape.gather(flat, 0, &rows)?;
            let a_flat = tape.reshape(alpha, &[b * m])?;
            let a_pick = tape.gather(a_flat, 0, &rows)?;
            let a_const = tape.detach(a_pick);
            let ratio = tape.div(a_pick, a_const)?;
            let ratio = tape.reshape(ratio, &[b, 1])?;
            let y = tape.mul(picked, ratio)?;
            tape.reshape(y, &out_shape)
        }
    }
}

/// Mean over the batch of `-log(alpha[b, label_b] + eps)`.
pub fn routing_loss_tape<T: Scalar>(tape: &mut Tape<T>, alpha: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(alpha).to_vec();
    if s.len() != 2 || labels.len() != s[0] {
        return Err(Error::Contract(format!("{} labels for routing weights of shape {s:?}", labels.len())));
    }
    let m = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Contract(format!("label {bad} out of range for {m} experts")));
    }
    let flat = tape.reshape(alpha, &[s[0] * m])?;
    let rows: Vec<usize> = labels.iter().enumerate().map(|(b, &l)| b * m + l).collect();
    let picked = tape.gather(flat, 0, &rows)?;
    let shifted = tape.shift(picked, T::lit(ROUTING_LOG_EPS));
    let logs = tape.log(shifted);
    let mean = tape.mean_all(logs)?;
    Ok(tape.scale(mean, -T::one()))
}

/// Per-sample oracle labels from detached expert forecasts `[B, ..]`.
pub fn oracle_labels<T: Scalar>(outputs: &[&Tensor<T>], target: &Tensor<T>) -> Result<Vec<usize>> {
    if outputs.is_empty() {
        return Err(Error::Config("no experts to label".into()));
    }
    for o in outputs {
        if o.shape() != target.shape() {
            return Err(Error::dim("oracle_labels", &[o.shape(), target.shape()]));
        }
    }
    let b = target.shape()[0];
    let per = target.len() / b.max(1);
    Ok((0..b)
        .map(|s| {
            let range = s * per..(s + 1) * per;
            let errs: Vec<T> = outputs
                .iter()
                .map(|o| {
                    o.data()[range.clone()]
                        .iter()
                        .zip(&target.data()[range.clone()])
                        .map(|(&a, &y)| (a - y).abs())
                        .sum()
                })
                .collect();
            argmin(&errs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(keys: Vec<f64>, m: usize, d: usize) -> MemoryBank<f64> {
        MemoryBank::new(Tensor::new(vec![m, d], keys).unwrap(), Tensor::eye(d)).unwrap()
    }

    #[test]
    fn identical_keys_route_uniformly() {
        let b = bank(vec![0.3, -1.0, 0.3, -1.0, 0.3, -1.0, 0.3, -1.0], 4, 2);
        let d = routing_weights(&[0.5, 2.0], &b).unwrap();
        for w in &d.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert_eq!(d.chosen, 0);
    }

    #[test]
    fn aligned_key_wins() {
        let b = bank(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let d = routing_weights(&[5.0, 0.0], &b).unwrap();
        assert!(d.weights[0] > 0.99);
        assert_eq!(d.chosen, 0);
    }

    #[test]
    fn empty_bank_is_config_error() {
        assert!(matches!(
            MemoryBank::<f64>::new(Tensor::zeros(&[0, 2]), Tensor::eye(2)),
            Err(Error::Config(_))
        ));
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 2]));
        let k = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(routing_weights_tape(&mut tape, q, k), Err(Error::Config(_))));
    }

    #[test]
    fn query_is_mean_over_steps_and_nodes() {
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let b = bank(vec![1.0, 0.0], 1, 2);
        assert_eq!(memory_query(&x, &b).unwrap(), vec![4.0, 5.0]);
    }

    #[test]
    fn query_and_weights_tape_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let keys = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0));
        let wq = Tensor::from_fn(&[5, 5], |_| rng.gen_range(-1.0..1.0));
        let b = MemoryBank::new(keys.clone(), wq.clone()).unwrap();
        let q = memory_query(&x, &b).unwrap();
        let d = routing_weights(&q, &b).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.reshape(&[1, 3, 4, 5]).unwrap());
        let wv = tape.constant(wq);
        let kv = tape.constant(keys);
        let qv = memory_query_tape(&mut tape, xv, wv).unwrap();
        let av = routing_weights_tape(&mut tape, qv, kv).unwrap();
        for (a, b) in tape.value(qv).data().iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(av).data().iter().zip(&d.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_modes_on_small_example() {
        let outs = vec![Tensor::from_f64(vec![1], &[1.0]).unwrap(), Tensor::from_f64(vec![1], &[3.0]).unwrap()];
        let dec = RoutingDecision { weights: vec![0.25, 0.75], chosen: 1 };
        assert_eq!(fuse_outputs(&dec, &outs, FusionMode::Weighted).unwrap().data(), &[2.5]);
        assert_eq!(fuse_outputs(&dec, &outs, FusionMode::Top1).unwrap().data(), &[3.0]);
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let outs = vec![Tensor::<f64>::zeros(&[2]), Tensor::zeros(&[3])];
        let dec = RoutingDecision { weights: vec![0.5, 0.5], chosen: 0 };
        assert!(matches!(fuse_outputs(&dec, &outs, FusionMode::Weighted), Err(Error::Contract(_))));
    }

    #[test]
    fn one_hot_weights_make_modes_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let outs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::from_fn(&[3, 2], |_| rng.gen_range(-5.0..5.0))).collect();
        for c in 0..4 {
            let mut w = vec![0.0; 4];
            w[c] = 1.0;
            let dec = RoutingDecision { weights: w, chosen: c };
            let a = fuse_outputs(&dec, &outs, FusionMode::Weighted).unwrap();
            let b = fuse_outputs(&dec, &outs, FusionMode::Top1).unwrap();
            assert_eq!(a, b);
            assert_eq!(b, outs[c]);
        }
    }

    #[test]
    fn routing_loss_values() {
        let dec = RoutingDecision { weights: vec![0.5f64, 0.5], chosen: 0 };
        assert!((routing_loss(&dec, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let dec = RoutingDecision { weights: vec![0.0f64, 1.0], chosen: 1 };
        assert!((routing_loss(&dec, 0).unwrap() - 27.631021).abs() < 1e-5);
        assert!(routing_loss(&dec, 1).unwrap().abs() < 1e-9);
        assert!(matches!(routing_loss(&dec, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn oracle_label_picks_lowest_error_and_first_on_tie() {
        let y = Tensor::<f64>::from_f64(vec![2], &[1.0, 1.0]).unwrap();
        let outs = vec![
            Tensor::from_f64(vec![2], &[3.0, 1.0]).unwrap(),
            Tensor::from_f64(vec![2], &[1.5, 1.0]).unwrap(),
            Tensor::from_f64(vec![2], &[1.0, 1.5]).unwrap(),
        ];
        assert_eq!(oracle_expert_label(&outs, &y).unwrap(), 1);
        let batch_y = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let a = Tensor::from_f64(vec![2, 2], &[1.0, 1.0, 5.0, 5.0]).unwrap();
        let b = Tensor::from_f64(vec![2, 2], &[2.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(oracle_labels(&[&a, &b], &batch_y).unwrap(), vec![0, 1]);
    }

    #[test]
    fn tape_routing_loss_matches_plain() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(vec![2, 2], &[0.5, 0.5, 0.0, 1.0]).unwrap());
        let l = routing_loss_tape(&mut tape, a, &[0, 0]).unwrap();
        let expect = (std::f64::consts::LN_2 - (1e-12f64).ln()) / 2.0;
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-9);
        assert!(matches!(routing_loss_tape(&mut tape, a, &[0, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_fusion_agrees_with_plain_and_top1_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[2, 2, 1], |_| rng.gen_range(-3.0..3.0))).collect();
        let alpha = Tensor::from_f64(vec![2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(alpha.clone());
        let ov: Vec<Var> = outs.iter().map(|o| tape.constant(o.clone())).collect();
        let w = fuse_tape(&mut tape, av, &ov, FusionMode::Weighted).unwrap();
        let t1 = fuse_tape(&mut tape, av, &ov, FusionMode::Top1).unwrap();
        for s in 0..2 {
            let dec = RoutingDecision { weights: alpha.data()[s * 3..s * 3 + 3].to_vec(), chosen: argmax(&alpha.data()[s * 3..s * 3 + 3]) };
            let per: Vec<Tensor<f64>> = outs.iter().map(|o| Tensor::new(vec![2, 1], o.data()[s * 2..s * 2 + 2].to_vec()).unwrap()).collect();
            let pw = fuse_outputs(&dec, &per, FusionMode::Weighted).unwrap();
            let pt = fuse_outputs(&dec, &per, FusionMode::Top1).unwrap();
            for i in 0..2 {
                assert!((tape.value(w).data()[s * 2 + i] - pw.data()[i]).abs() < 1e-12);
                assert_eq!(tape.value(t1).data()[s * 2 + i], pt.data()[i]);
            }
        }
    }

    #[test]
    fn top1_passes_gradient_to_router() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let outs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[2, 2], |_| rng.gen_range(-3.0..3.0))).collect();
        let scores = Tensor::from_f64(vec![2, 3], &[0.1, 0.9, -0.4, 1.2, 0.3, 0.2]).unwrap();
        let mut tape = Tape::new();
        let sv = tape.constant(scores);
        let a = tape.softmax(sv, -1).unwrap();
        let ov: Vec<Var> = outs.iter().map(|o| tape.constant(o.clone())).collect();
        let y = fuse_tape(&mut tape, a, &ov, FusionMode::Top1).unwrap();
        let l = tape.sum_all(y).unwrap();
        let g = tape.gradients(l).unwrap();
        assert!(g.wrt(sv).data().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn weighted_fusion_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[2, 2], |_| rng.gen_range(-3.0..3.0))).collect();
        let scores = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let err = finite_difference_check(
            |t, s| {
                let a = t.softmax(s, -1)?;
                let ov: Vec<Var> = outs.iter().map(|o| t.constant(o.clone())).collect();
                let y = fuse_tape(t, a, &ov, FusionMode::Weighted)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &scores,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("Top1".parse::<FusionMode>().unwrap(), FusionMode::Top1);
        assert_eq!("weighted".parse::<FusionMode>().unwrap(), FusionMode::Weighted);
        assert!("mean".parse::<FusionMode>().is_err());
    }
}
