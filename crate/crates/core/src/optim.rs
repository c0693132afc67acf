//! Adam with explicit, serializable moment state.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.8, beta2: 0.99, eps: 1e-8 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    /// First and second moments by parameter name.
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &vars {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg, vars, m, v, t: 0 })
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// One update; parameters without a gradient keep their value but
    /// their moments still decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in &self.vars {
            let m = &self.m[name];
            let v = &self.v[name];
            let (m_new, v_new) = match grads.get(var.as_tensor()) {
                Some(g) => ((m * beta1)?.add(&(g * (1.0 - beta1))?)?, (v * beta2)?.add(&(g.sqr()? * (1.0 - beta2))?)?),
                None => ((m * beta1)?, (v * beta2)?),
            };
            let (m_new, v_new) = (m_new.detach(), v_new.detach());
            let denom = ((&v_new / bc2)?.sqrt()? + eps)?;
            let update = ((&m_new / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?.detach())?;
            self.m.insert(name.clone(), m_new);
            self.v.insert(name.clone(), v_new);
        }
        Ok(())
    }

    /// Replaces the moments; shapes must match the parameters.
    pub fn load_state(&mut self, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>, t: u64) -> Result<()> {
        for (name, var) in &self.vars {
            for (kind, map) in [("m", &m), ("v", &v)] {
                let s = map.get(name).ok_or_else(|| Error::Checkpoint(format!("optimizer state {kind} missing for {name}")))?;
                if s.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {kind} for {name} has shape {:?}, expected {:?}", s.dims(), var.dims())));
                }
            }
        }
        if m.len() != self.vars.len() || v.len() != self.vars.len() {
            return Err(Error::Checkpoint("optimizer state has extra entries".into()));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}
