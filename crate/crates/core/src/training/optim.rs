use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.9, eps: 1e-6 }
    }
}

/// `lr0 · 0.5^⌊step / halve_every⌋`
pub fn learning_rate(lr0: f64, halve_every: usize, step: usize) -> f64 {
    let halvings = (step / halve_every.max(1)).min(i32::MAX as usize) as i32;
    lr0 * 0.5f64.powi(halvings)
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            if p.len() != g.len() {
                return Err(Error::dim(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves() {
        assert_eq!(learning_rate(0.002, 200, 0), 0.002);
        assert_eq!(learning_rate(0.002, 200, 199), 0.002);
        assert_eq!(learning_rate(0.002, 200, 200), 0.001);
        assert_eq!(learning_rate(0.002, 40000, 80000), 0.0005);
        let mut prev = f64::INFINITY;
        for s in 0..2000 {
            let lr = learning_rate(0.002, 150, s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &[Tensor::vector(vec![0.3, -2.0])], 0.01).unwrap();
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+ε).
        let w = store.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-6))).abs() < 1e-15);
        assert!((w[1] - (-1.0 + 0.01 * 2.0 / (2.0 + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0, -4.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        for step in 0..3000 {
            let g = store.get("w").unwrap().map(|x| 2.0 * x);
            opt.step(&mut store, &[g], learning_rate(0.05, 1000, step)).unwrap();
        }
        assert!(store.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }
}
