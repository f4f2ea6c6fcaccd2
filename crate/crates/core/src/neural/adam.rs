//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};

use super::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }
}

/// Moment accumulators plus step count; one slot per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        AdamState { config, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update applied in place.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NeuralError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "adam state holds {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut state = AdamState::new(AdamConfig::with_learning_rate(1e-4), 3);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        state.apply(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_equals_learning_rate() {
        let mut state = AdamState::new(AdamConfig::with_learning_rate(1e-4), 1);
        let mut params = vec![0.0];
        state.apply(&mut params, &[1.0]).unwrap();
        // m_hat = v_hat = 1 after bias correction, so delta = -lr / (1 + eps)
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((params[0] - expected).abs() < 1e-18, "{}", params[0]);
    }

    #[test]
    fn sign_flipped_gradients_pull_back_toward_start() {
        let mut state = AdamState::new(AdamConfig::with_learning_rate(1e-2), 1);
        let mut params = vec![0.0];
        state.apply(&mut params, &[1.0]).unwrap();
        let after_one = params[0];
        state.apply(&mut params, &[-1.0]).unwrap();
        assert!(params[0].abs() < after_one.abs());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AdamState::new(AdamConfig::default(), 2);
        let mut params = vec![0.0];
        assert!(matches!(
            state.apply(&mut params, &[1.0]),
            Err(NeuralError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn serde_roundtrip() {
        let mut state = AdamState::new(AdamConfig::with_learning_rate(1e-4), 2);
        let mut params = vec![0.1, 0.2];
        state.apply(&mut params, &[0.3, -0.4]).unwrap();
        let json = serde_json::to_string(&state).unwrap();
        let back: AdamState = serde_json::from_str(&json).unwrap();
        assert_eq!(state, back);
    }
}
