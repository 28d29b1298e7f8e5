//! Scale attention, patch attention and the duo encoder.
//!
//! The encoder keeps tokens as `[B, N, T, D]` internally (T = scale extent)
//! so scale attention can treat B and N as batch axes directly.

use crate::autograd::Var;
use crate::config::{AttentionMode, DuoFormerConfig, Readout};
use crate::error::{config_err, contract_err, shape_err, Result};
use crate::nn::{Ctx, Init};
use crate::tensor::Float;
use crate::tokenizer::MultiScaleTokens;

pub const FFN_RATIO: usize = 4;

pub fn init_msa(init: &mut Init, prefix: &str, d: usize) {
    init.linear(&format!("{prefix}.qkv"), d, 3 * d);
    init.linear(&format!("{prefix}.proj"), d, d);
}

/// Pre-norm transformer block: LN, MSA, residual, LN, FFN, residual.
pub fn init_block(init: &mut Init, prefix: &str, d: usize) {
    init.layer_norm(&format!("{prefix}.ln1"), d);
    init_msa(init, prefix, d);
    init.layer_norm(&format!("{prefix}.ln2"), d);
    init.linear(&format!("{prefix}.fc1"), d, FFN_RATIO * d);
    init.linear(&format!("{prefix}.fc2"), FFN_RATIO * d, d);
}

pub fn init_encoder(init: &mut Init, cfg: &DuoFormerConfig, scale_extent: usize) {
    let d = cfg.embed_dim;
    if cfg.scale_pos {
        init.zeros("encoder.scale_pos", &[scale_extent, d]);
    }
    let duo = cfg.attention_mode == AttentionMode::Duo;
    if cfg.patch_pos && duo {
        init.zeros("encoder.patch_pos", &[cfg.patch_count, d]);
    }
    for l in 0..cfg.layers {
        init_block(init, &format!("encoder.layer{l}.scale"), d);
        if duo {
            init_msa(init, &format!("encoder.layer{l}.patch"), d);
        }
    }
}

pub fn init_baseline(init: &mut Init, cfg: &DuoFormerConfig) {
    if cfg.patch_pos {
        init.zeros("encoder.patch_pos", &[cfg.patch_count, cfg.embed_dim]);
    }
    for l in 0..cfg.baseline_layers {
        init_block(init, &format!("encoder.block{l}"), cfg.embed_dim);
    }
}

pub fn init_head(init: &mut Init, cfg: &DuoFormerConfig) {
    let std = init.linear_std;
    init.trunc_normal("head.w", &[cfg.embed_dim, cfg.num_classes], std);
    init.zeros("head.b", &[cfg.num_classes]);
}

/// Multi-head self-attention over axis −2 of `x: [..., T, D]`, also returning
/// the attention weights `[..., h, T, T]`.
pub fn msa_with_weights<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = ctx.tape.shape(x).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(shape_err!("msa expects [..., T, D], got {shape:?}"));
    }
    let (t, d) = (shape[r - 2], shape[r - 1]);
    if heads == 0 || d % heads != 0 {
        return Err(config_err!(
            "embed_dim D={d} is not divisible by heads h={heads}"
        ));
    }
    let dh = d / heads;
    let qkv = ctx.linear(x, &format!("{prefix}.qkv"))?;
    let mut split_shape = shape[..r - 1].to_vec();
    split_shape.extend([heads, dh]);
    // [..., T, h, dh] -> [..., h, T, dh]
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    let part = |ctx: &mut Ctx<'_, T>, i: usize| -> Result<Var> {
        let p = ctx.tape.slice(qkv, r - 1, i * d, d)?;
        let p = ctx.tape.reshape(p, &split_shape)?;
        ctx.tape.permute(p, &perm)
    };
    let q = part(ctx, 0)?;
    let k = part(ctx, 1)?;
    let v = part(ctx, 2)?;
    let kt = ctx.tape.transpose(k, r - 1, r)?;
    let scores = ctx.tape.matmul(q, kt)?;
    let scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = ctx.tape.softmax(scores, r)?;
    let o = ctx.tape.matmul(attn, v)?;
    let o = ctx.tape.permute(o, &perm)?;
    let mut merged = shape[..r - 2].to_vec();
    merged.extend([t, d]);
    let o = ctx.tape.reshape(o, &merged)?;
    let out = ctx.linear(o, &format!("{prefix}.proj"))?;
    Ok((out, attn))
}

pub fn msa<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    Ok(msa_with_weights(ctx, x, prefix, heads)?.0)
}

/// Y = X′ + FFN(LN(X′)), X′ = X + MSA(LN(X)), attention over axis −2.
pub fn block<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let h = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
    let a = msa(ctx, h, prefix, heads)?;
    let x1 = ctx.tape.add(x, a)?;
    let h = ctx.layer_norm(x1, &format!("{prefix}.ln2"))?;
    let h = ctx.linear(h, &format!("{prefix}.fc1"))?;
    let h = ctx.tape.gelu(h)?;
    let h = ctx.linear(h, &format!("{prefix}.fc2"))?;
    ctx.tape.add(x1, h)
}

/// Scale attention on `[B, S+1, N, D]` tokens: per-patch attention over the
/// scale axis, then FFN. Returns the same layout.
pub fn scale_attention_block<T: Float>(
    ctx: &mut Ctx<'_, T>,
    tokens: &MultiScaleTokens,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    if !tokens.has_scale_token {
        return Err(contract_err!(
            "scale attention block needs an attached scale token"
        ));
    }
    let x = ctx.tape.permute(tokens.tokens, &[0, 2, 1, 3])?;
    let y = block(ctx, x, prefix, heads)?;
    ctx.tape.permute(y, &[0, 2, 1, 3])
}

/// One MSA over the patch axis of `[B, N, D]`; no LN, FFN or residual.
pub fn patch_attention<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let s = ctx.tape.shape(x);
    if s.len() != 3 {
        return Err(shape_err!("patch attention expects [B, N, D], got {s:?}"));
    }
    msa(ctx, x, prefix, heads)
}

/// Adds `encoder.scale_pos` to `[B, N, T, D]` when enabled.
fn add_scale_pos<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &DuoFormerConfig) -> Result<Var> {
    if !cfg.scale_pos {
        return Ok(x);
    }
    let p = ctx.param("encoder.scale_pos")?;
    let (ps, xs) = (ctx.tape.shape(p).to_vec(), ctx.tape.shape(x).to_vec());
    if ps[..] != xs[2..] {
        return Err(shape_err!(
            "scale positional embedding {ps:?} does not match scale extent {:?}",
            &xs[2..]
        ));
    }
    ctx.tape.add(x, p)
}

fn add_patch_pos<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &DuoFormerConfig) -> Result<Var> {
    if !cfg.patch_pos {
        return Ok(x);
    }
    let p = ctx.param("encoder.patch_pos")?;
    ctx.tape.add(x, p)
}

/// Reads the per-patch conduit `[B, N, D]` out of `[B, N, T, D]`.
fn conduit<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, readout: Readout) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    match readout {
        Readout::AvgTokens => ctx.tape.mean(x, 2),
        _ => {
            let first = ctx.tape.slice(x, 2, 0, 1)?;
            ctx.tape.reshape(first, &[s[0], s[1], s[3]])
        }
    }
}

/// Duo encoder over `[B, T, N, D]` tokens, returning the final patch
/// attention output `[B, N, D]`.
///
/// Each layer runs a scale block, reads the conduit (the scale token, or the
/// first/averaged entry without one), runs patch attention and writes the
/// result back into scale index 0.
pub fn encoder<T: Float>(
    ctx: &mut Ctx<'_, T>,
    tokens: &MultiScaleTokens,
    cfg: &DuoFormerConfig,
) -> Result<Var> {
    if cfg.layers == 0 {
        return Err(config_err!("encoder needs at least one layer"));
    }
    let x = ctx.tape.permute(tokens.tokens, &[0, 2, 1, 3])?;
    let mut x = add_scale_pos(ctx, x, cfg)?;
    let s = ctx.tape.shape(x).to_vec();
    let (b, n, t, d) = (s[0], s[1], s[2], s[3]);
    let mut out = None;
    for l in 0..cfg.layers {
        x = block(ctx, x, &format!("encoder.layer{l}.scale"), cfg.heads)?;
        let mut c = conduit(ctx, x, cfg.readout)?;
        if l == 0 {
            c = add_patch_pos(ctx, c, cfg)?;
        }
        let p = patch_attention(ctx, c, &format!("encoder.layer{l}.patch"), cfg.heads)?;
        if l + 1 < cfg.layers {
            let p4 = ctx.tape.reshape(p, &[b, n, 1, d])?;
            x = if t == 1 {
                p4
            } else {
                let rest = ctx.tape.slice(x, 2, 1, t - 1)?;
                ctx.tape.concat(&[p4, rest], 2)?
            };
        }
        out = Some(p);
    }
    Ok(out.expect("at least one layer"))
}

/// Scale attention only: L scale blocks, then the conduit `[B, N, D]`.
pub fn scale_only_encoder<T: Float>(
    ctx: &mut Ctx<'_, T>,
    tokens: &MultiScaleTokens,
    cfg: &DuoFormerConfig,
) -> Result<Var> {
    let x = ctx.tape.permute(tokens.tokens, &[0, 2, 1, 3])?;
    let mut x = add_scale_pos(ctx, x, cfg)?;
    for l in 0..cfg.layers {
        x = block(ctx, x, &format!("encoder.layer{l}.scale"), cfg.heads)?;
    }
    conduit(ctx, x, cfg.readout)
}

/// Standard encoder blocks over `[B, N, D]` patch tokens.
pub fn baseline_encoder<T: Float>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    cfg: &DuoFormerConfig,
) -> Result<Var> {
    let mut x = add_patch_pos(ctx, x, cfg)?;
    for l in 0..cfg.baseline_layers {
        x = block(ctx, x, &format!("encoder.block{l}"), cfg.heads)?;
    }
    Ok(x)
}
