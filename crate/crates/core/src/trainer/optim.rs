//! Adam with decoupled weight decay, with moments that can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            cfg,
            steps: 0,
            first,
            second,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Collects the gradient of every parameter that received one, cut
    /// loose from the autograd graph so that no activations outlive the
    /// step.
    pub fn gradients(params: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.clone(), g.detach())))
            .collect()
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.apply(params, &Self::gradients(params, grads))
    }

    /// One update from named gradients. Parameters without a gradient are
    /// left untouched, moments included.
    pub fn apply(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has no state for {name}")))?;
            *m = (m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = self.second.get_mut(name).expect("moments are created together");
            *v = (v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let m_hat = self.first[name].affine(1.0 / bias1, 0.0)?;
            let v_hat = self.second[name].affine(1.0 / bias2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let w = var.as_tensor().detach();
            let decayed = w.affine(1.0 - c.lr * c.weight_decay, 0.0)?;
            var.set(&(decayed - update.affine(c.lr, 0.0)?)?)?;
        }
        Ok(())
    }

    /// Moments as named tensors (`m.<name>`, `v.<name>`).
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, steps: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, slots) in [("m", &mut self.first), ("v", &mut self.second)] {
            for (k, t) in slots.iter_mut() {
                let src = state
                    .get(&format!("{prefix}.{k}"))
                    .ok_or_else(|| Error::Config(format!("missing optimizer moment {prefix}.{k}")))?;
                if src.dims() != t.dims() {
                    return Err(Error::Shape(format!("optimizer moment {prefix}.{k}")));
                }
                *t = src.to_dtype(t.dtype())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
