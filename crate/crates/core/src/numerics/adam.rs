use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("params {}, grads {}, state {}", params.len(), grads.len(), state.m.len()),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut st = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0; 3], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6, "moved to {}", p[0]);
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let mut w = vec![1.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        for _ in 0..200 {
            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut st, &cfg).unwrap();
        }
        assert!(w[0].abs() < 1e-2, "w = {}", w[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
    }
}
