use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected Adam update to `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr * sign(g) (up to eps)
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, -1.0];
        s.step(&mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = AdamState::new(
            1,
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        );
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 1.0);
            s.step(&mut p, &[g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
