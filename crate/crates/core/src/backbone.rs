//! Four-stage convolutional feature pyramid.
//!
//! Stage i has spatial extent Pᵢ = H / (4·2ⁱ). At the module boundary every
//! stage tensor is channel-last, `[B, Pᵢ, Pᵢ, Cᵢ]`.

use std::path::Path;

use crate::autograd::Var;
use crate::config::{stage_extent, DuoFormerConfig};
use crate::error::{config_err, format_err, shape_err, Error, Result};
use crate::format::{Container, Record};
use crate::nn::{Ctx, Init};
use crate::tensor::{Float, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

/// Stage tensors indexed by stage number; absent stages are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub input_size: usize,
    pub stages: [Option<Tensor<T>>; 4],
}

impl<T: Float> FeaturePyramid<T> {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            stages: [None, None, None, None],
        }
    }

    pub fn with_stage(mut self, i: usize, t: Tensor<T>) -> Self {
        self.stages[i] = Some(t);
        self
    }

    pub fn present(&self) -> Vec<usize> {
        (0..4).filter(|&i| self.stages[i].is_some()).collect()
    }

    pub fn batch(&self) -> Option<usize> {
        self.stages.iter().flatten().next().map(|t| t.shape()[0])
    }

    /// Checks every present stage has shape `[B, Pᵢ, Pᵢ, Cᵢ]` with a shared B.
    pub fn validate(&self) -> Result<()> {
        let batch = self.batch();
        for (i, t) in self.stages.iter().enumerate() {
            let Some(t) = t else { continue };
            let p = stage_extent(self.input_size, i).ok_or_else(|| {
                config_err!(
                    "input size {} has no integral stage {i} extent",
                    self.input_size
                )
            })?;
            let s = t.shape();
            if s.len() != 4 || s[1] != p || s[2] != p || Some(s[0]) != batch {
                return Err(shape_err!(
                    "stage{i} tensor has shape {s:?}, expected [B, {p}, {p}, C] with B = {}",
                    batch.unwrap_or(0)
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self, i: usize) -> Option<usize> {
        self.stages[i].as_ref().map(|t| t.shape()[3])
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert("input_size", Record::int_scalar(self.input_size as i64));
        for (i, t) in self.stages.iter().enumerate() {
            if let Some(t) = t {
                c.insert(format!("stage{i}"), Record::from_float(t));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let size = c
            .require("input_size")?
            .as_ints()
            .and_then(|v| v.first().copied())
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err!("`input_size` must be a positive integer record"))?;
        let mut pyr = Self::new(size as usize);
        for i in 0..4 {
            if let Some(r) = c.get(&format!("stage{i}")) {
                pyr.stages[i] = Some(r.to_float()?);
            }
        }
        if pyr.present().is_empty() {
            return Err(format_err!("pyramid container holds no stage entries"));
        }
        pyr.validate().map_err(|e| match e {
            Error::Shape(m) | Error::Config(m) => Error::Format(m),
            other => other,
        })?;
        Ok(pyr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Tape handles for the pyramid of one pass, channel-last.
#[derive(Clone, Debug, Default)]
pub struct PyramidVars {
    pub stages: [Option<Var>; 4],
}

impl PyramidVars {
    pub fn from_pyramid<T: Float>(ctx: &mut Ctx<'_, T>, p: &FeaturePyramid<T>) -> Result<Self> {
        p.validate()?;
        let mut out = Self::default();
        for i in 0..4 {
            if let Some(t) = &p.stages[i] {
                out.stages[i] = Some(ctx.input(t));
            }
        }
        Ok(out)
    }

    pub fn get(&self, i: usize) -> Result<Var> {
        self.stages[i].ok_or_else(|| config_err!("stage {i} is not present in the feature pyramid"))
    }
}

/// Registers the toy backbone's parameters under `backbone.`.
pub fn init_backbone(init: &mut Init, cfg: &DuoFormerConfig) {
    let c = cfg.channels;
    for i in 0..=cfg.deepest_stage() {
        let c_in = if i == 0 { IMAGE_CHANNELS } else { c[i - 1] };
        let p = format!("backbone.stage{i}");
        init.conv(&format!("{p}.conv1"), c_in, c[i], 3, false);
        init.batch_norm(&format!("{p}.bn1"), c[i]);
        init.conv(&format!("{p}.conv2"), c[i], c[i], 3, false);
        init.batch_norm(&format!("{p}.bn2"), c[i]);
    }
}

fn conv_bn_relu<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    prefix: &str,
    conv: &str,
    bn: &str,
    stride: usize,
) -> Result<Var> {
    let y = ctx.conv(x, &format!("{prefix}.{conv}"), stride, 1, false)?;
    let y = ctx.batch_norm(y, &format!("{prefix}.{bn}"))?;
    ctx.tape.relu(y)
}

/// Runs the toy backbone on images `[B, 3, H, H]` through the deepest stage
/// in `stages`, returning the requested stages channel-last.
///
/// Stage 0 is two stride-2 convolutions (H/4); each later stage is one
/// stride-2 and one stride-1 convolution. All are 3×3 with BN and ReLU.
pub fn toy_backbone_forward<T: Float>(
    ctx: &mut Ctx<'_, T>,
    images: Var,
    stages: &[usize],
) -> Result<PyramidVars> {
    let s = ctx.tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != IMAGE_CHANNELS || s[2] != s[3] {
        return Err(shape_err!(
            "images must be [B, {IMAGE_CHANNELS}, H, H], got {s:?}"
        ));
    }
    let deepest = stages.iter().copied().max().unwrap_or(0);
    if stage_extent(s[2], deepest).is_none() {
        return Err(config_err!(
            "image side {} is not divisible by {} as stage {deepest} requires",
            s[2],
            4usize << deepest
        ));
    }
    let mut out = PyramidVars::default();
    let mut x = images;
    for i in 0..=deepest {
        let p = format!("backbone.stage{i}");
        let (s1, s2) = if i == 0 { (2, 2) } else { (2, 1) };
        x = conv_bn_relu(ctx, x, &p, "conv1", "bn1", s1)?;
        x = conv_bn_relu(ctx, x, &p, "conv2", "bn2", s2)?;
        if stages.contains(&i) {
            out.stages[i] = Some(ctx.tape.permute(x, &[0, 2, 3, 1])?);
        }
    }
    Ok(out)
}
