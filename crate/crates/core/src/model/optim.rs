use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{GdrtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            config: AdamConfig::default(),
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(GdrtError::ShapeMismatch(format!(
                "adam: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(GdrtError::NonFinite {
                layer: format!("gradient[{i}]"),
            });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.data.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !params.is_finite() {
            return Err(GdrtError::NonFinite {
                layer: "parameters after update".into(),
            });
        }
        Ok(())
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            embed_dim: 8,
            ..ModelConfig::new(10, 8, 1)
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(p.len());
        st.step(&mut p, &vec![0.0; before.len()], 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(p.len());
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64).sin()).collect();
        st.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(p.len());
        let g = vec![2.0; p.len()];
        st.step(&mut p, &g, 0.01).unwrap();
        for (a, b) in p.data.iter().zip(&before.data) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = params();
        let mut st = AdamState::new(p.len());
        let mut g = vec![0.0; p.len()];
        g[3] = f64::INFINITY;
        assert!(st.step(&mut p, &g, 0.01).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.3, 0.4];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }
}
