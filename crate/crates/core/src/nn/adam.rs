use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update in place.
    ///
    /// A gradient containing NaN or infinity is rejected: parameters and
    /// state are left untouched and an error is returned.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(PamError::config(format!(
                "adam state holds {} entries, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!("rejecting batch: non-finite gradient at entry {i}");
            return Err(PamError::non_finite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let cfg = AdamConfig::with_lr(1e-3);
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&cfg, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let cfg = AdamConfig::with_lr(1e-2);
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        let mut prev = p[0];
        for _ in 0..200 {
            st.step(&cfg, &mut p, &[0.7]).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn second_step_matches_hand_computation() {
        // After step 1 with g=0.5: m=0.05, v=0.00025.
        // Step 2 with g=-0.2: m=0.9*0.05+0.1*(-0.2)=0.025,
        // v=0.999*0.00025+0.001*0.04=0.00028975,
        // mhat=0.025/0.19=0.131578947..., vhat=0.00028975/0.001999=0.144947473...
        let cfg = AdamConfig::with_lr(0.1);
        let mut st = AdamState::new(1);
        let mut p = vec![1.0];
        st.step(&cfg, &mut p, &[0.5]).unwrap();
        let after_first = p[0];
        assert!((after_first - (1.0 - 0.1 * 1.0 / (1.0 + 1e-8 / 0.5))).abs() < 1e-12);
        st.step(&cfg, &mut p, &[-0.2]).unwrap();
        let mhat: f64 = 0.025 / 0.19;
        let vhat: f64 = 0.00028975 / (1.0 - 0.999f64 * 0.999);
        let expect = after_first - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-12, "{} vs {expect}", p[0]);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_rejected_without_state_change() {
        let cfg = AdamConfig::with_lr(1e-3);
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        st.step(&cfg, &mut p, &[0.1, 0.1]).unwrap();
        let before = (st.clone(), p.clone());
        assert!(st.step(&cfg, &mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(st, before.0);
        assert_eq!(p, before.1);
    }
}
