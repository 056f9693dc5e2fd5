//! Time2Vec temporal embedding and its fusion with raw node features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Learnable frequencies and phases. Component 0 is linear, the rest periodic (sin).
#[derive(Debug, Clone, PartialEq)]
pub struct Time2VecParams<T> {
    pub w: Vec<T>,
    pub phi: Vec<T>,
}

impl<T: Scalar> Time2VecParams<T> {
    pub fn new(w: Vec<T>, phi: Vec<T>) -> Result<Self> {
        if w.len() != phi.len() {
            return Err(Error::Config(format!(
                "time2vec frequency/phase length mismatch: {} vs {}",
                w.len(),
                phi.len()
            )));
        }
        if w.len() < 2 {
            return Err(Error::Config(format!(
                "time2vec width must be at least 2, got {}",
                w.len()
            )));
        }
        Ok(Time2VecParams { w, phi })
    }

    /// Periodic frequencies and all phases uniform in `[0, 2π]`; the linear
    /// frequency is drawn from `[0, 0.1]` so the drift term starts small.
    pub fn init(width: usize, rng: &mut impl Rng) -> Result<Self> {
        let two_pi = std::f64::consts::TAU;
        let w = (0..width)
            .map(|i| {
                let hi = if i == 0 { 0.1 } else { two_pi };
                T::lit(rng.gen_range(0.0..hi))
            })
            .collect();
        let phi = (0..width).map(|_| T::lit(rng.gen_range(0.0..two_pi))).collect();
        Self::new(w, phi)
    }

    pub fn width(&self) -> usize {
        self.w.len()
    }
}

/// `out[0] = w0·τ + φ0`, `out[i] = sin(wi·τ + φi)` for `i ≥ 1`.
pub fn time2vec<T: Scalar>(tau: T, params: &Time2VecParams<T>) -> Result<Vec<T>> {
    if params.width() < 2 {
        return Err(Error::Config("time2vec width must be at least 2".into()));
    }
    if !tau.is_finite() {
        return Err(Error::Input("time index is not finite".into()));
    }
    Ok(params
        .w
        .iter()
        .zip(&params.phi)
        .enumerate()
        .map(|(i, (&w, &p))| {
            let lin = w * tau + p;
            if i == 0 {
                lin
            } else {
                lin.sin()
            }
        })
        .collect())
}

/// Time index: whole days since the first day of the series plus the
/// time-of-day fraction in `[0, 1)`.
pub fn time_index(timestamp: i64, origin: i64) -> f64 {
    let day = timestamp.div_euclid(SECONDS_PER_DAY) - origin.div_euclid(SECONDS_PER_DAY);
    let tod = timestamp.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64;
    day as f64 + tod
}

/// Tape version of [`time2vec`] for a tensor of time indices of any shape;
/// returns shape `tau.shape ++ [d_t]`.
pub fn time2vec_tape<T: Scalar>(tape: &mut Tape<T>, tau: Var, w: Var, phi: Var) -> Result<Var> {
    let width = tape.shape(w).iter().product::<usize>();
    if width < 2 || tape.shape(phi).iter().product::<usize>() != width {
        return Err(Error::Config(format!(
            "time2vec parameters must share a width of at least 2, got {:?} and {:?}",
            tape.shape(w),
            tape.shape(phi)
        )));
    }
    let mut expanded = tape.shape(tau).to_vec();
    expanded.push(1);
    let tau = tape.reshape(tau, &expanded)?;
    let scaled = tape.mul(tau, w)?;
    let lin = tape.add(scaled, phi)?;
    let linear = tape.gather(lin, -1, &[0])?;
    let rest: Vec<usize> = (1..width).collect();
    let periodic = tape.gather(lin, -1, &rest)?;
    let periodic = tape.sin(periodic);
    tape.concat(&[linear, periodic], -1)
}

/// Projection from `[x ∥ TIM]` (width `C + d_t`) to the hidden width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    /// Shape `[d, C + d_t]`.
    pub w: Tensor<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn new(w: Tensor<T>) -> Result<Self> {
        if w.ndim() != 2 {
            return Err(Error::dim("projection", &[w.shape()]));
        }
        Ok(ProjectionParams { w })
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_width(&self) -> usize {
        self.w.shape()[1]
    }
}

/// `x'(t, n) = W_proj · [x(t, n) ∥ TIM(t)]` on the tape.
///
/// `x` is `[.., T', N, C]`, `tim` is `[.., T', d_t]` and `w_proj` is
/// `[d, C + d_t]`; the result is `[.., T', N, d]`.
pub fn embed_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, tim: Var, w_proj: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ts = tape.shape(tim).to_vec();
    let ws = tape.shape(w_proj).to_vec();
    if xs.len() < 3 || ts.len() != xs.len() - 1 || ts[..ts.len() - 1] != xs[..xs.len() - 2] {
        return Err(Error::dim("embed_input", &[&xs, &ts]));
    }
    let channels = xs[xs.len() - 1];
    let nodes = xs[xs.len() - 2];
    let dt = ts[ts.len() - 1];
    if ws.len() != 2 || ws[1] != channels + dt {
        return Err(Error::dim("embed_input", &[&xs, &ts, &ws]));
    }
    let mut with_node_axis = ts.clone();
    with_node_axis.insert(ts.len() - 1, 1);
    let tim = tape.reshape(tim, &with_node_axis)?;
    let mut target = with_node_axis.clone();
    target[ts.len() - 1] = nodes;
    let tim = tape.broadcast_to(tim, &target)?;
    let joined = tape.concat(&[x, tim], -1)?;
    let wt = tape.transpose(w_proj)?;
    tape.matmul(joined, wt)
}

/// Plain-value version of [`embed_tape`]: `x` is `[T', N, C]`, `tim` is `[T', d_t]`.
pub fn embed_input<T: Scalar>(x: &Tensor<T>, tim: &Tensor<T>, proj: &ProjectionParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(tim.clone());
    let wv = tape.constant(proj.w.clone());
    let out = embed_tape(&mut tape, xv, tv, wv)?;
    Ok(tape.value(out).clone())
}
