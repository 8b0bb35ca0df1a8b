//! Adam with decoupled weight decay.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::params::{ParamStore, TensorMap};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let slots = params
            .vars()
            .map(|(name, var)| {
                Ok(Slot { name: name.clone(), var: var.clone(), m: var.zeros_like()?, v: var.zeros_like()? })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for s in &mut self.slots {
            let Some(g) = grads.get(&s.var) else { continue };
            s.m = ((&s.m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            s.v = ((&s.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&s.m / bc1)?;
            let denom = ((&s.v / bc2)?.sqrt()? + c.eps)?;
            let theta = (s.var.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            let next = (theta - (m_hat / denom)? * c.lr)?;
            s.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment buffers as `m.<name>` / `v.<name>`.
    pub fn state(&self) -> TensorMap {
        let mut out = TensorMap::new();
        for s in &self.slots {
            out.insert(format!("m.{}", s.name), s.m.clone());
            out.insert(format!("v.{}", s.name), s.v.clone());
        }
        out
    }

    pub fn restore(&mut self, state: &TensorMap, step: u64) -> Result<()> {
        for s in &mut self.slots {
            let fetch = |k: String| state.get(&k).cloned().ok_or(LabError::MissingInput(format!("optimizer state {k}")));
            s.m = fetch(format!("m.{}", s.name))?.to_dtype(s.var.dtype())?;
            s.v = fetch(format!("v.{}", s.name))?.to_dtype(s.var.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}
