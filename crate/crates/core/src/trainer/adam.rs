use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    lr_scale: f64,
    m: Tensor,
    v: Tensor,
}

/// Adam over named variables, with a per-variable learning-rate scale.
/// State is exportable so checkpoints resume bit-identically.
#[derive(Debug)]
pub struct Adam {
    params: AdamParams,
    lr: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(lr: f64, params: AdamParams) -> Self {
        Self {
            params,
            lr,
            step: 0,
            slots: Vec::new(),
        }
    }

    /// Registers variables in a group whose rate is `lr * lr_scale`.
    pub fn add_group(&mut self, vars: Vec<(String, Var)>, lr_scale: f64) -> Result<()> {
        for (name, var) in vars {
            if self.slots.iter().any(|s| s.name == name) {
                return Err(Error::Parameter(format!("variable {name} registered twice")));
            }
            let m = var.as_tensor().zeros_like()?;
            let v = m.clone();
            self.slots.push(Slot {
                name,
                var,
                lr_scale,
                m,
                v,
            });
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One update; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            slot.m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let lr = self.lr * slot.lr_scale;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<name>` and `v/<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("m/{}", s.name), s.m.clone());
            out.insert(format!("v/{}", s.name), s.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for s in &mut self.slots {
            for (which, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
                let key = format!("{prefix}{which}/{}", s.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Format(format!("{key} has shape {:?}, expected {:?}", t.dims(), slot.dims())));
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
