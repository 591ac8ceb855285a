use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use spine_neural::{ParamStore, Tensor};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, AdamSlot>,
    pub steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
            steps: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every parameter named in `grads`.
    ///
    /// All gradients are checked before anything is written, so a
    /// non-finite gradient leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor<f64>>, lr: f64) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(CoreError::NonFiniteGradient {
                    param: name.clone(),
                    step: self.steps,
                });
            }
            let p = store.get(name)?;
            if !p.requires_grad {
                return Err(CoreError::Freeze(format!("gradient supplied for frozen `{name}`")));
            }
            if p.value.shape() != g.shape() {
                return Err(CoreError::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        for (name, g) in grads {
            let n = g.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let value = &mut store.get_mut(name)?.value;
            for ((w, &gi), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
