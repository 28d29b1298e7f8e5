//! The per-patch scale token at scale index 0.
//!
//! Fused mode brings every included stage down to the √N×√N patch grid,
//! concatenates channels in ascending stage order and applies a 1×1
//! convolution, BN and ReLU to reach D channels.

use crate::autograd::Var;
use crate::backbone::PyramidVars;
use crate::config::{isqrt, stage_extent, DuoFormerConfig, ScaleTokenMode};
use crate::error::{config_err, contract_err, shape_err, Result};
use crate::nn::{Ctx, Init};
use crate::tensor::Float;
use crate::tokenizer::MultiScaleTokens;

/// One downsampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// conv3×3 (channels preserved) with BN and ReLU.
    Conv { stride: usize },
    /// Max pool with kernel = stride = factor.
    Pool(usize),
}

/// Chain that takes stage `stage` (extent `extent`) down to `side`.
pub fn downsample_plan(stage: usize, extent: usize, side: usize) -> Result<Vec<Step>> {
    let unreachable = || {
        config_err!(
            "stage {stage} extent {extent} is not reducible to the {side}x{side} patch grid by conv/pool"
        )
    };
    if side == 0 || extent % side != 0 {
        return Err(unreachable());
    }
    let ratio = extent / side;
    match ratio {
        1 => Ok(vec![]),
        2 if stage >= 2 => Ok(vec![Step::Pool(2)]),
        2 => Ok(vec![Step::Conv { stride: 1 }, Step::Pool(2)]),
        r if r >= 4 && r % 2 == 0 => Ok(vec![Step::Conv { stride: 2 }, Step::Pool(r / 2)]),
        _ => Err(unreachable()),
    }
}

pub fn init_scale_token(init: &mut Init, cfg: &DuoFormerConfig) -> Result<()> {
    match cfg.scale_token_mode {
        ScaleTokenMode::None => {}
        ScaleTokenMode::Learnable => {
            let std = init.linear_std;
            init.trunc_normal(
                "scale_token.learnable",
                &[cfg.patch_count, cfg.embed_dim],
                std,
            );
        }
        ScaleTokenMode::Fused => {
            let side = isqrt(cfg.patch_count);
            let mut total = 0;
            for &s in &cfg.stages {
                let c = cfg.channels[s];
                let extent = stage_extent(cfg.input_size, s)
                    .ok_or_else(|| config_err!("stage {s} extent is not integral"))?;
                if downsample_plan(s, extent, side)?
                    .iter()
                    .any(|st| matches!(st, Step::Conv { .. }))
                {
                    init.conv(&format!("scale_token.down{s}.conv"), c, c, 3, false);
                    init.batch_norm(&format!("scale_token.down{s}.bn"), c);
                }
                total += c;
            }
            init.conv("scale_token.fuse", total, cfg.embed_dim, 1, true);
            init.batch_norm("scale_token.fuse_bn", cfg.embed_dim);
        }
    }
    Ok(())
}

/// X̃_Σ: every included stage downsampled to √N×√N and concatenated along
/// channels, `[B, ΣCᵢ, √N, √N]` (NCHW).
pub fn downsample_concat<T: Float>(
    ctx: &mut Ctx<'_, T>,
    pyramid: &PyramidVars,
    stages: &[usize],
    side: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(stages.len());
    for &s in stages {
        let x = pyramid.get(s)?;
        let mut x = ctx.tape.permute(x, &[0, 3, 1, 2])?;
        let extent = ctx.tape.shape(x)[2];
        for step in downsample_plan(s, extent, side)? {
            x = match step {
                Step::Conv { stride } => {
                    let y = ctx.conv(x, &format!("scale_token.down{s}.conv"), stride, 1, false)?;
                    let y = ctx.batch_norm(y, &format!("scale_token.down{s}.bn"))?;
                    ctx.tape.relu(y)?
                }
                Step::Pool(k) => ctx.tape.max_pool2d(x, k, k)?,
            };
        }
        parts.push(x);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        ctx.tape.concat(&parts, 1)
    }
}

/// Fused scale token `[B, N, D]`, patches row-major.
pub fn build_scale_token<T: Float>(
    ctx: &mut Ctx<'_, T>,
    pyramid: &PyramidVars,
    cfg: &DuoFormerConfig,
) -> Result<Var> {
    if cfg.scale_token_mode != ScaleTokenMode::Fused {
        return Err(contract_err!(
            "build_scale_token needs fused mode, config has `{}`",
            cfg.scale_token_mode
        ));
    }
    let side = isqrt(cfg.patch_count);
    let x = downsample_concat(ctx, pyramid, &cfg.stages, side)?;
    let y = ctx.conv(x, "scale_token.fuse", 1, 0, true)?;
    let y = ctx.batch_norm(y, "scale_token.fuse_bn")?;
    let y = ctx.tape.relu(y)?;
    let b = ctx.tape.shape(y)[0];
    let y = ctx.tape.permute(y, &[0, 2, 3, 1])?;
    ctx.tape.reshape(y, &[b, cfg.patch_count, cfg.embed_dim])
}

/// Prepends the scale token at scale index 0.
pub fn attach_scale_token<T: Float>(
    ctx: &mut Ctx<'_, T>,
    tokens: MultiScaleTokens,
    pyramid: &PyramidVars,
    cfg: &DuoFormerConfig,
) -> Result<MultiScaleTokens> {
    if tokens.has_scale_token {
        return Err(contract_err!("scale token is already attached"));
    }
    let shape = ctx.tape.shape(tokens.tokens).to_vec();
    let (b, n, d) = (shape[0], shape[2], shape[3]);
    let st = match cfg.scale_token_mode {
        ScaleTokenMode::None => return Ok(tokens),
        ScaleTokenMode::Fused => build_scale_token(ctx, pyramid, cfg)?,
        ScaleTokenMode::Learnable => {
            let p = ctx.param("scale_token.learnable")?;
            ctx.tape.broadcast_to(p, &[b, n, d])?
        }
    };
    if ctx.tape.shape(st) != [b, n, d] {
        return Err(shape_err!(
            "scale token shape {:?} does not match tokens [{b}, _, {n}, {d}]",
            ctx.tape.shape(st)
        ));
    }
    let st = ctx.tape.reshape(st, &[b, 1, n, d])?;
    let joined = ctx.tape.concat(&[st, tokens.tokens], 1)?;
    Ok(MultiScaleTokens {
        tokens: joined,
        maps: tokens.maps,
        has_scale_token: true,
    })
}
