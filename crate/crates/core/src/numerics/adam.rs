use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam moments for one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    label: String,
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(label: impl Into<String>, n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            label: label.into(),
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forget the moment estimates and restart bias correction.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    /// One descent step along `grads`. Parameters are untouched on error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        Error::check_dim("adam parameters", self.m.len(), params.len())?;
        Error::check_dim("adam gradients", self.m.len(), grads.len())?;
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                label: self.label.clone(),
                index,
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new("p", 3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new("p", 3, cfg);
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[3.0, -0.01, 1e3]).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction, so the move is lr * g / (|g| + eps).
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * cfg.lr).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = AdamState::new("psi", 2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        let err = s.step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert_eq!(
            err,
            Error::NonFiniteGradient {
                label: "psi".into(),
                index: 1
            }
        );
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(s.steps_taken(), 0);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut s = AdamState::new("p", 2, AdamConfig::default());
            let mut p = vec![1.0, 2.0];
            for k in 0..50 {
                let g = [p[0] - 0.1 * k as f64, (p[1] * 0.3).sin()];
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = AdamState::new("p", 1, AdamConfig::with_lr(0.05));
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            s.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
