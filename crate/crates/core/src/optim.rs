//! AdamW with per-group learning rates and a single step decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

/// `base` before iteration `ceil(decay_at * total)`, `base * factor` from it on.
pub fn lr_at(iteration: usize, total: usize, base: f64, decay_at: f64, factor: f64) -> f64 {
    // snap values within rounding error of an integer, so 2/3 of 3000 is 2000
    let x = decay_at * total as f64;
    let boundary = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() } as usize;
    if iteration < boundary {
        base
    } else {
        base * factor
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    pub total_iterations: usize,
    /// Number of updates applied so far.
    pub step: usize,
    pub state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

impl AdamW {
    pub fn new(config: OptimConfig, total_iterations: usize) -> Self {
        Self { config, total_iterations, step: 0, state: BTreeMap::new() }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.config.backbone_lr,
            ParamGroup::Head => self.config.lr,
        };
        lr_at(self.step, self.total_iterations, base, self.config.decay_at, self.config.decay_factor)
    }

    /// Applies one update from `grads`. Parameters without a gradient keep
    /// their value but still decay.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore) -> Result<StepInfo> {
        let mut sq = 0.0;
        for p in ps.params().values() {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm}")));
        }
        let scale = if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            self.config.grad_clip / grad_norm
        } else {
            1.0
        };
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let head_lr = self.lr(ParamGroup::Head);
        for (name, p) in ps.params() {
            let lr = self.lr(p.group);
            let w = p.var.as_tensor();
            let g = match grads.get(w) {
                Some(g) => (g.detach() * scale)?,
                None => w.zeros_like()?,
            };
            let entry = match self.state.get(name) {
                Some(s) => s.clone(),
                None => Moments { m: w.zeros_like()?, v: w.zeros_like()? },
            };
            let m = ((&entry.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = ((&entry.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + c.eps)?)?;
            let decayed = (w.detach() * (1.0 - lr * c.weight_decay))?;
            p.var.set(&(decayed - (update * lr)?)?)?;
            self.state.insert(name.clone(), Moments { m, v });
        }
        self.step += 1;
        Ok(StepInfo { lr: head_lr, grad_norm })
    }
}
