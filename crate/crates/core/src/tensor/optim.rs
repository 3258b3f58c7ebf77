//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient (or frozen) are left as is.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} gradients for {}",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient length {} for parameter of {}", g.len(), p.len())));
            }
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                p[i] -= (c.lr as f64 * mh / (vh.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(3.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            opt.step(&mut s, &[Some(vec![0.0])]).unwrap();
        }
        assert_eq!(s.get(s.find("x").unwrap()).item(), 3.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, &[Some(vec![1.0])]).unwrap();
        let x = s.get(s.find("x").unwrap()).item();
        assert!((x - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-6);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = scalar_store(0.5);
            let mut opt = Adam::new(AdamConfig::default(), &s);
            for k in 0..100 {
                let x = s.get(s.find("x").unwrap()).item();
                opt.step(&mut s, &[Some(vec![2.0 * x + (k as f32).sin()])]).unwrap();
            }
            s.get(s.find("x").unwrap()).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
