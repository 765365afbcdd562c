use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length for the inverse-square-root schedule; 0 keeps
    /// the learning rate constant.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 400,
            clip_norm: 0.0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let t = t.max(1) as f64;
        let w = self.warmup_steps as f64;
        if t < w {
            self.lr * t / w
        } else {
            self.lr * (w / t).sqrt()
        }
    }
}

/// First/second moment buffers shaped like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_update",
                format!(
                    "{} parameters, {} gradients, {} moment buffers",
                    store.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let clip = if c.clip_norm > 0.0 {
            let n = grads.global_norm();
            if n > c.clip_norm {
                c.clip_norm / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            if p.len() != g.len() {
                return Err(Error::shape(
                    "adam_update",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gr), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gr = gr * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    fn constant() -> AdamConfig {
        AdamConfig {
            lr: 0.1,
            warmup_steps: 0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(1.5);
        let mut adam = AdamState::new(&store, constant());
        let grads = Gradients::zeros_like(&store);
        adam.update(&mut store, &grads).unwrap();
        assert_eq!(store.get(store.find("x").unwrap()).item(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g0 in [0.3, -2.0] {
            let mut store = scalar_store(0.0);
            let x = store.find("x").unwrap();
            let mut adam = AdamState::new(&store, constant());
            // loss = g0 * x has gradient g0
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.param(x);
                let loss = g.scale(xv, g0);
                g.backward(loss).unwrap()
            };
            adam.update(&mut store, &grads).unwrap();
            let expected = -0.1 * g0 / (g0.abs() + 1e-9);
            assert!((store.get(x).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        let mut store = scalar_store(3.0);
        let x = store.find("x").unwrap();
        let f = |v: f64| (v - 1.0) * (v - 1.0);
        let before = f(store.get(x).item());
        let mut adam = AdamState::new(&store, constant());
        for _ in 0..2 {
            let v = store.get(x).item();
            let mut grads = Gradients::zeros_like(&store);
            grads.accumulate(&{
                let mut g = Graph::new(&store);
                let xv = g.param(x);
                let loss = g.scale(xv, 2.0 * (v - 1.0));
                g.backward(loss).unwrap()
            });
            adam.update(&mut store, &grads).unwrap();
        }
        assert!(f(store.get(x).item()) < before);
    }

    #[test]
    fn inverse_sqrt_schedule() {
        let c = AdamConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(16), 0.5);
    }
}
