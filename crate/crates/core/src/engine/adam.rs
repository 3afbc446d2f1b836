//! Adam optimizer with bias correction, keyed by parameter name.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment buffers per trainable tensor plus a shared step
/// counter. One optimizer instance drives one adaptation (or training)
/// run; per-episode resets create a fresh instance.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: HashMap<String, Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: BETA1, beta2: BETA2, eps: EPS, step: 0, slots: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`. Rejects NaN gradients, naming
    /// the parameter.
    pub fn step(&mut self, name: &str, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "parameter {} has {} values but gradient has {}",
                    name,
                    params.len(),
                    grads.len()
                ),
            });
        }
        if grads.iter().any(|g| g.is_nan()) {
            return Err(Error::Numerical {
                op: "adam_step".to_string(),
                detail: format!("NaN gradient for parameter {}", name),
            });
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
        });
        slot.t += 1;
        self.step = self.step.max(slot.t);
        let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
        for i in 0..params.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grads[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
