//! Whole-model finite-difference gradient check.
//!
//! Every trainable tensor is checked at a seeded sample of coordinates by
//! central differences on random inputs, with batch norm in train mode so the
//! check covers the batch-statistics path. The loss is a fixed random
//! weighting of the logits: its value stays near the logits' scale, so the
//! finite-difference roundoff stays far below the gradients being checked.
//! Cross-entropy has its own check in the op tests.
//!
//! Some gradients are zero by construction (a bias feeding batch norm, the key
//! bias under the softmax). Their central differences are pure roundoff, about
//! one ulp of the loss over 2h, so relative errors use a denominator floor of
//! `1e4 · ε · max(1, |L|) / (2h)` instead of the fixed one.

use serde::Serialize;

use crate::config::DuoFormerConfig;
use crate::error::{contract_err, Result};
use crate::model::{DuoFormer, Input};
use crate::nn::{Kind, Mode};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const BATCH: usize = 2;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// (flat index, analytic, numeric) at the worst coordinate.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradReport {
    pub step: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl ModelGradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>14}  {}\n", "group", "max rel error", "status");
        for g in &self.groups {
            let ok = if g.max_rel_error < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            s.push_str(&format!(
                "{:<16} {:>14.3e}  {ok}\n",
                g.group, g.max_rel_error
            ));
            for t in &g.tensors {
                s.push_str(&format!(
                    "  {:<40} {:>10.3e}  ({} coords)\n",
                    t.name, t.max_rel_error, t.checked
                ));
            }
        }
        s
    }
}

/// Denominator floor for relative errors: the central-difference roundoff of
/// a loss of magnitude `loss`, with a wide margin.
pub fn roundoff_floor(loss: f64, step: f64) -> f64 {
    (1e4 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * step)).max(1e-8)
}

/// Parameter group used in reports.
pub fn group_of(name: &str) -> &'static str {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "backbone" => "backbone",
        "tokenizer" => "tokenizer",
        "scale_token" => "scale_token",
        "head" => "head",
        "encoder" => match parts.get(2).copied() {
            Some("scale") => "encoder.scale",
            Some("patch") => "encoder.patch",
            _ if parts[1].starts_with("block") => "encoder.block",
            _ => "encoder.pos",
        },
        _ => "other",
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates per tensor; tensors this small or smaller are checked fully.
    pub samples: usize,
    pub seed: u64,
    /// Multiplies every analytic gradient; only for exercising the failure path.
    pub corrupt_scale: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            samples: 8,
            seed: 0,
            corrupt_scale: None,
        }
    }
}

/// Runs the check in f64 regardless of the configured dtype.
pub fn model_grad_check(cfg: &DuoFormerConfig, opts: &CheckOptions) -> Result<ModelGradReport> {
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(contract_err!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        ));
    }
    let mut cfg = cfg.clone();
    cfg.dtype = DType::F64;
    cfg.freeze_backbone = false;
    let mut model = DuoFormer::<f64>::new(cfg.clone())?;
    let mut rng = Rng::new(opts.seed).fork("gradcheck");
    let h = cfg.input_size;
    let images: Vec<f64> = (0..BATCH * h * h * 3)
        .map(|_| rng.uniform(0.0, 1.0))
        .collect();
    let images = Tensor::new(&[BATCH, h, h, 3], images)?;
    let weights: Vec<f64> = (0..BATCH * cfg.num_classes).map(|_| rng.normal()).collect();
    let weights = Tensor::new(&[BATCH, cfg.num_classes], weights)?;

    let record_loss = |m: &DuoFormer<f64>, ctx: &mut crate::nn::Ctx<'_, f64>| -> Result<_> {
        let logits = m.forward(ctx, Input::Images(&images))?;
        let w = ctx.input(&weights);
        let weighted = ctx.tape.mul(logits, w)?;
        ctx.tape.sum_all(weighted)
    };
    let loss_at = |m: &DuoFormer<f64>| -> Result<f64> {
        let mut ctx = m.ctx(Mode::Train);
        let loss = record_loss(m, &mut ctx)?;
        Ok(ctx.tape.value(loss)[0])
    };

    let (analytic, loss0) = {
        let mut ctx = model.ctx(Mode::Train);
        let loss = record_loss(&model, &mut ctx)?;
        let value = ctx.tape.value(loss)[0];
        ctx.tape.backward(loss)?;
        (ctx.finish().grads, value)
    };
    let floor = roundoff_floor(loss0, opts.step);
    let relative_error = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let names = model.params.param_names();
    let mut groups: Vec<GroupCheck> = Vec::new();
    for name in names {
        let grad = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g.clone())
            .ok_or_else(|| contract_err!("no gradient reached `{name}`"))?;
        debug_assert_eq!(model.params.kind(&name), Some(Kind::Param));
        let numel = grad.len();
        let coords: Vec<usize> = if numel <= opts.samples {
            (0..numel).collect()
        } else {
            let mut r = Rng::new(opts.seed).fork(&name);
            (0..opts.samples).map(|_| r.below(numel)).collect()
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for &i in &coords {
            let orig = model.params.get(&name)?.data()[i];
            model.params.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let plus = loss_at(&model)?;
            model.params.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let minus = loss_at(&model)?;
            model.params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[i] * opts.corrupt_scale.unwrap_or(1.0);
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || check.checked == 1 {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = (i, a, numeric);
            }
        }
        let group = group_of(&name);
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.max_rel_error = g.max_rel_error.max(check.max_rel_error);
                g.tensors.push(check);
            }
            None => groups.push(GroupCheck {
                group: group.to_string(),
                max_rel_error: check.max_rel_error,
                tensors: vec![check],
            }),
        }
    }
    Ok(ModelGradReport {
        step: opts.step,
        floor,
        tolerance: TOLERANCE,
        groups,
    })
}
