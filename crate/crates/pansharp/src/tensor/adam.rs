//! Adam with bias-corrected moments, over ordered groups of parameter
//! arrays. The caller must present the same parameters in the same order
//! on every step.

use crate::error::{Error, Result};

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over `(param, grad)` pairs. Moment slots are created on
    /// first use and keyed by position.
    pub fn step<'a>(
        &mut self,
        pairs: impl Iterator<Item = (&'a mut [f64], &'a [f64])>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (param, grad)) in pairs.enumerate() {
            if param.len() != grad.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter len {} vs gradient len {}", param.len(), grad.len()),
                ));
            }
            if slot == self.m.len() {
                self.m.push(vec![0.0; param.len()]);
                self.v.push(vec![0.0; param.len()]);
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            if m.len() != param.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("moment len {} vs parameter len {}", m.len(), param.len()),
                ));
            }
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
