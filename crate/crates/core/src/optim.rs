//! AdamW with decoupled weight decay.

use crate::adsnet::{Grads, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn for_params(config: AdamWConfig, params: &[Param]) -> Self {
        Self::new(config, params.iter().map(|p| p.value.len()))
    }

    /// One update of every tensor in `params` (slot `i` pairs with `grads[i]`).
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let all = vec![true; params.len()];
        self.step_masked(params, grads, &all)
    }

    /// Update the trainable model parameters; running statistics are skipped.
    pub fn step_params(&mut self, params: &mut [Param], grads: &Grads) -> Result<()> {
        let mask: Vec<bool> = params.iter().map(|p| p.trainable).collect();
        let mut ps: Vec<&mut [f64]> = params.iter_mut().map(|p| p.value.data_mut()).collect();
        let gs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.step_masked(&mut ps, &gs, &mask)
    }

    fn step_masked(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], mask: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adamw", "parameter, gradient and moment lists differ in length"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate().filter(|(i, _)| mask[*i]) {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape("adamw", format!("tensor {i}: sizes differ")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of tensor {i} at element {j}: {}", g[j])));
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate().filter(|(i, _)| mask[*i]) {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let theta = p[k];
                p[k] = theta * (1.0 - c.lr * c.weight_decay) - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
