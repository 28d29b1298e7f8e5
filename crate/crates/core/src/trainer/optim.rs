//! Adam and the one-cycle learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::config::TrainConfig;
use crate::error::{contract_err, Result};
use crate::nn::{Kind, ParamStore};
use crate::tensor::Float;

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// One bias-corrected Adam update of `param` in place. `step` is 1-based.
/// No weight decay term.
pub fn adam_update<T: Float>(
    param: &mut [T],
    grad: &[T],
    slot: &mut AdamSlot,
    step: u64,
    lr: f64,
    p: AdamParams,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(contract_err!(
            "adam: parameter has {} values but gradient has {}",
            param.len(),
            grad.len()
        ));
    }
    if step == 0 {
        return Err(contract_err!("adam: step count is 1-based"));
    }
    if slot.m.is_empty() {
        slot.m = vec![0.0; param.len()];
        slot.v = vec![0.0; param.len()];
    } else if slot.m.len() != param.len() {
        return Err(contract_err!(
            "adam: moment state has {} values for a parameter of {}",
            slot.m.len(),
            param.len()
        ));
    }
    let bc1 = 1.0 - p.beta1.powi(step as i32);
    let bc2 = 1.0 - p.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let m = p.beta1 * slot.m[i] + (1.0 - p.beta1) * g;
        let v = p.beta2 * slot.v[i] + (1.0 - p.beta2) * g * g;
        slot.m[i] = m;
        slot.v[i] = v;
        let update = lr * (m / bc1) / ((v / bc2).sqrt() + p.eps);
        param[i] = T::from_f64(param[i].as_f64() - update);
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`], reading the
/// gradients accumulated on the tensors themselves.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub params: AdamParams,
    pub step: u64,
    pub slots: HashMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self {
            params,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(AdamParams {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        })
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, t, kind) in store.iter_mut() {
            if kind != Kind::Param {
                continue;
            }
            let Some(g) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let slot = self.slots.entry(name.to_string()).or_default();
            adam_update(t.data_mut(), &g, slot, self.step, lr, self.params)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            max_lr: cfg.max_lr,
            total_steps,
            pct_start: cfg.pct_start,
            div_factor: cfg.div_factor,
            final_div_factor: cfg.final_div_factor,
        }
    }

    /// Step index at which the rate equals `max_lr`.
    pub fn peak_step(&self) -> usize {
        let last = self.total_steps.saturating_sub(1) as f64;
        (self.pct_start * last).round() as usize
    }

    /// Cosine warmup from `max_lr / div_factor` to `max_lr` at the peak step,
    /// then cosine decay to `max_lr / final_div_factor` at the last step.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(contract_err!(
                "onecycle: step {step} outside 0..{}",
                self.total_steps
            ));
        }
        let peak = self.peak_step();
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div_factor;
        if step == peak {
            return Ok(self.max_lr);
        }
        let cos_interp =
            |from: f64, to: f64, frac: f64| from + (to - from) * (1.0 - (PI * frac).cos()) / 2.0;
        if step < peak {
            Ok(cos_interp(start, self.max_lr, step as f64 / peak as f64))
        } else {
            let span = (self.total_steps - 1 - peak) as f64;
            Ok(cos_interp(self.max_lr, end, (step - peak) as f64 / span))
        }
    }
}

pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    OneCycle::new(cfg, total_steps).lr(step)
}
