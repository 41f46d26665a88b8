//! Stochastic gradient descent with heavy-ball momentum.
//!
//! Per parameter: `v ← μv + ∇`, `θ ← θ − η (v + λθ)`. Weight decay stays
//! out of the momentum buffer.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Updates every parameter from its accumulated gradient. Parameters
    /// that received no gradient are treated as having a zero one.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_where(params, lr, |_| true)
    }

    /// Like [`Sgd::step`] but leaves parameters rejected by `trainable`
    /// untouched.
    pub fn step_where(&mut self, params: &mut ParamStore, lr: f64, trainable: impl Fn(&str) -> bool) -> Result<()> {
        let mut updates = Vec::new();
        for (name, t) in params.iter() {
            if !trainable(name) {
                continue;
            }
            let theta = t.data();
            let grad = t.grad().unwrap_or_else(|| vec![0.0; theta.len()]);
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
            let mut next = Vec::with_capacity(theta.len());
            for i in 0..theta.len() {
                v[i] = self.momentum * v[i] + grad[i];
                next.push(theta[i] - lr * (v[i] + self.weight_decay * theta[i]));
            }
            updates.push((name.clone(), next));
        }
        for (name, data) in updates {
            params.set(&name, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::param(&[1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.5, 0.0);
        for _ in 0..2 {
            let w = store.get("w").unwrap().clone();
            w.scale(2.0).unwrap().sum().unwrap().backward().unwrap();
            opt.step(&mut store, 0.25).unwrap();
        }
        // v1 = 2, θ1 = 0.5; v2 = 1 + 2 = 3, θ2 = 0.5 − 0.75
        assert_eq!(store.get("w").unwrap().data(), &[-0.25]);
    }

    #[test]
    fn decay_pulls_towards_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::param(&[2], vec![2.0, -4.0]).unwrap());
        Sgd::new(0.9, 0.5).step(&mut store, 0.1).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.9, -3.8]);
    }

    #[test]
    fn decay_skips_the_momentum_buffer() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::param(&[1], vec![2.0]).unwrap());
        let mut opt = Sgd::new(0.9, 0.5);
        opt.step(&mut store, 0.1).unwrap();
        opt.step(&mut store, 0.1).unwrap();
        // no gradient: v stays 0, θ shrinks by 5% per step
        assert!((store.get("w").unwrap().data()[0] - 1.805).abs() < 1e-15);
    }
}
