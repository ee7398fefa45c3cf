//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Mat>,
    second: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates exactly the entries named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
            let p = param.as_mut_slice();
            for (i, &g0) in grad.as_slice().iter().enumerate() {
                let g = g0 + c.weight_decay * p[i];
                let mi = &mut m.as_mut_slice()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                let vi = &mut v.as_mut_slice()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = m.as_slice()[i] / bias1;
                let v_hat = v.as_slice()[i] / bias2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads.values().flat_map(|g| g.as_slice()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("a", Mat::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let grads = BTreeMap::from([("a".to_string(), Mat::from_vec(1, 2, vec![0.5, -3.0]).unwrap())]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &grads);
        let a = store.expect("a").as_slice();
        assert!((a[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((a[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Mat::from_vec(1, 1, vec![3.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        for _ in 0..500 {
            let x = store.expect("x").as_slice()[0];
            let grads = BTreeMap::from([("x".to_string(), Mat::from_vec(1, 1, vec![2.0 * x]).unwrap())]);
            opt.step(&mut store, &grads);
        }
        assert!(store.expect("x").as_slice()[0].abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut grads = BTreeMap::from([("a".to_string(), Mat::from_vec(1, 2, vec![3.0, 4.0]).unwrap())]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut grads, 2.0), global_norm(&grads));
    }
}
