//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments of one parameter group, with the group's own
/// step count (groups that stay frozen do not advance it).
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One in-place update of `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, hp: &AdamParams) {
        assert_eq!(params.len(), self.m.len(), "parameter group resized");
        assert_eq!(grads.len(), self.m.len(), "gradient shape mismatch");
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] *= 1.0 - lr * hp.weight_decay;
            params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}
