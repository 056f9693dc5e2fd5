//! Adam optimizer.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam { lr, steps: 0, first: zeros(), second: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer state covers {} parameters, store has {}, gradients {}",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        for (id, g) in grads.iter() {
            let i = id.index();
            if g.shape() != store.get(id).shape() || self.first[i].shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {} of shape {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPSILON));
        let (one, lr) = (T::one(), T::lit(self.lr));
        let (c1, c2) = (T::lit(c1), T::lit(c2));
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(vec![1], &[value]).unwrap());
        (s, id)
    }

    fn grads_of(store: &ParamStore<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(store);
        grads.grads[0] = Tensor::from_f64(vec![1], &[g]).unwrap();
        grads
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = single(1.5);
        let mut opt = Adam::new(&s, 0.001);
        for _ in 0..10 {
            let g = Gradients::zeros_like(&s);
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(id).data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for g in [3.0, -0.02] {
            let (mut s, id) = single(0.0);
            let mut opt = Adam::new(&s, 0.001);
            let gr = grads_of(&s, g);
            opt.step(&mut s, &gr).unwrap();
            let delta = s.get(id).data()[0];
            assert!((delta + 0.001 * g.signum()).abs() < 1e-8, "{delta}");
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        // independent 1-D simulation of the textbook recursion
        let (g, lr) = (0.37, 0.01);
        let (mut s, id) = single(0.0);
        let mut opt = Adam::new(&s, lr);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        let mut last = 0.0;
        for t in 1..=1000 {
            let before = s.get(id).data()[0];
            let gr = grads_of(&s, g);
            opt.step(&mut s, &gr).unwrap();
            last = before - s.get(id).data()[0];
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((last - lr).abs() < 1e-3 * lr, "{last}");
        assert!((s.get(id).data()[0] - x).abs() < 1e-9);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let (mut s, _) = single(0.0);
        let mut opt = Adam::new(&s, 0.1);
        s.add("q", Tensor::zeros(&[2]));
        let g = Gradients::zeros_like(&s);
        assert!(matches!(opt.step(&mut s, &g), Err(Error::Contract(_))));
    }
}
