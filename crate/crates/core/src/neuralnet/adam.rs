use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created lazily on
/// the first step and must keep the same parameter layout afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64) -> Result<()> {
        let g = grads.slices();
        let mut p = model.parameters_mut();
        self.step_slices(&mut p, &g, lr)
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::Shape {
                expected: params.len(),
                found: grads.len(),
            });
        }
        if let Some(bad) = grads.iter().flat_map(|g| g.iter()).find(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient {bad}")));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() {
            return Err(Error::State("parameter layout changed between Adam steps".into()));
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![3.0, -0.01, 250.0];
        adam.step_slices(&mut [&mut p], &[&g], 1e-3).unwrap();
        let expected = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![0.3, -7.0];
        let g = vec![0.0, 0.0];
        for _ in 0..100 {
            adam.step_slices(&mut [&mut p], &[&g], 1e-2).unwrap();
        }
        assert_eq!(p, vec![0.3, -7.0]);
        assert_eq!(adam.steps(), 100);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(x) = x^2, gradient 2x
        let mut adam = Adam::new(AdamConfig::default());
        let mut x = vec![1.0];
        let mut prev = 1.0f64;
        for _ in 0..50 {
            let g = vec![2.0 * x[0]];
            adam.step_slices(&mut [&mut x], &[&g], 1e-2).unwrap();
            assert!(x[0].abs() < prev);
            prev = x[0].abs();
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![1.0];
        let err = adam.step_slices(&mut [&mut p], &[&[f64::NAN]], 1e-3);
        assert!(matches!(err, Err(Error::Divergence(_))));
        assert_eq!(p, vec![1.0]);
    }
}
