//! Adam with bias correction, stepping uphill.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_rate(1e-5)
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One ascent step: `θ ← θ + lr · m̂ / (√v̂ + eps)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state has the wrong length");
    state.step += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::with_rate(0.1));
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.5, -3.0, 1e3], &mut s, &AdamConfig::with_rate(1e-3));
        assert!((p[0] - 1e-3).abs() < 1e-10);
        assert!((p[1] + 1e-3).abs() < 1e-10);
        assert!((p[2] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn two_steps_by_hand() {
        let cfg = AdamConfig::with_rate(0.1);
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[1.0, -2.0], &mut s, &cfg);
        adam_step(&mut p, &[3.0, 0.5], &mut s, &cfg);
        let manual = |g1: f64, g2: f64, p0: f64| {
            let m1 = 0.1 * g1;
            let v1 = 0.001 * g1 * g1;
            let p1 = p0 + 0.1 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
            let m2 = 0.9 * m1 + 0.1 * g2;
            let v2 = 0.999 * v1 + 0.001 * g2 * g2;
            let b1 = 1.0 - 0.81;
            let b2 = 1.0 - 0.999f64 * 0.999;
            p1 + 0.1 * (m2 / b1) / ((v2 / b2).sqrt() + 1e-8)
        };
        assert!((p[0] - manual(1.0, 3.0, 1.0)).abs() < 1e-12);
        assert!((p[1] - manual(-2.0, 0.5, 2.0)).abs() < 1e-12);
    }
}
