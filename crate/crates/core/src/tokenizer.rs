//! Projects every pyramid stage to the embedding width and regroups it into
//! the shared √N×√N patch grid.
//!
//! Tokens are laid out `[B, S, N, D]`: for each stage (deepest first) the
//! P′ᵢ² within-patch offsets, row-major inside the patch block; patches are
//! row-major over the grid.

use crate::autograd::Var;
use crate::backbone::PyramidVars;
use crate::config::{isqrt, stage_extent, stage_tokens_side, DuoFormerConfig};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Ctx, Init};
use crate::tensor::Float;

/// Flattened-position ↔ (patch, offset) bijection for one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageIndexMap {
    pub stage: usize,
    /// Pᵢ
    pub extent: usize,
    /// P′ᵢ
    pub block: usize,
    /// √N
    pub grid: usize,
    /// `slot_of[y·Pᵢ + x] = (patch, offset)`
    pub slot_of: Vec<(usize, usize)>,
    /// `position_of[offset·N + patch] = y·Pᵢ + x`
    pub position_of: Vec<usize>,
}

impl StageIndexMap {
    pub fn new(input_size: usize, patch_count: usize, stage: usize) -> Result<Self> {
        let block = stage_tokens_side(input_size, patch_count, stage)?;
        let extent = stage_extent(input_size, stage)
            .ok_or_else(|| config_err!("stage {stage} extent is not integral"))?;
        let grid = isqrt(patch_count);
        let mut slot_of = Vec::with_capacity(extent * extent);
        let mut position_of = vec![0; extent * extent];
        for y in 0..extent {
            for x in 0..extent {
                let patch = (y / block) * grid + x / block;
                let offset = (y % block) * block + x % block;
                slot_of.push((patch, offset));
                position_of[offset * patch_count + patch] = y * extent + x;
            }
        }
        Ok(Self {
            stage,
            extent,
            block,
            grid,
            slot_of,
            position_of,
        })
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.block * self.block
    }
}

/// The index maps for every included stage, deepest first, as concatenated
/// along the scale axis.
pub fn patch_index_map(cfg: &DuoFormerConfig) -> Result<Vec<StageIndexMap>> {
    cfg.stages
        .iter()
        .rev()
        .map(|&s| StageIndexMap::new(cfg.input_size, cfg.patch_count, s))
        .collect()
}

/// Number of scale entries S = Σ P′ᵢ² over included stages.
pub fn scale_len(cfg: &DuoFormerConfig) -> Result<usize> {
    Ok(patch_index_map(cfg)?
        .iter()
        .map(|m| m.tokens_per_patch())
        .sum())
}

/// Tokenized multi-scale input for one pass.
#[derive(Clone, Debug)]
pub struct MultiScaleTokens {
    /// `[B, S, N, D]`, or `[B, S+1, N, D]` once a scale token is attached.
    pub tokens: Var,
    pub maps: Vec<StageIndexMap>,
    pub has_scale_token: bool,
}

pub fn init_tokenizer(init: &mut Init, cfg: &DuoFormerConfig, stages: &[usize]) {
    for &s in stages {
        init.linear(
            &format!("tokenizer.stage{s}"),
            cfg.channels[s],
            cfg.embed_dim,
        );
    }
}

/// Per-stage linear projection `[B,Pᵢ,Pᵢ,Cᵢ] → [B,Pᵢ,Pᵢ,D]`.
pub fn project<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, stage: usize) -> Result<Var> {
    let name = format!("tokenizer.stage{stage}.w");
    if !ctx.store().contains(&name) {
        return Err(config_err!(
            "no projection weights for stage {stage} (`{name}` missing)"
        ));
    }
    let w_in = ctx.store().get(&name)?.shape()[0];
    let c = *ctx.tape.shape(x).last().unwrap_or(&0);
    if c != w_in {
        return Err(shape_err!(
            "stage {stage} has {c} channels but its projection expects {w_in}"
        ));
    }
    ctx.linear(x, &format!("tokenizer.stage{stage}"))
}

/// Regroups one projected stage `[B,Pᵢ,Pᵢ,D]` to `[B,P′ᵢ²,N,D]`.
pub fn group_stage<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, map: &StageIndexMap) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != map.extent || s[2] != map.extent {
        return Err(shape_err!(
            "stage {} expects [B, {p}, {p}, D], got {s:?}",
            map.stage,
            p = map.extent
        ));
    }
    let (b, d) = (s[0], s[3]);
    let n = map.grid * map.grid;
    let flat = ctx.tape.reshape(x, &[b, map.extent * map.extent, d])?;
    let gathered = ctx.tape.index_select(flat, 1, &map.position_of)?;
    ctx.tape
        .reshape(gathered, &[b, map.tokens_per_patch(), n, d])
}

/// Inverse of [`group_stage`].
pub fn ungroup_stage<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, map: &StageIndexMap) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let n = map.grid * map.grid;
    if s.len() != 4 || s[1] != map.tokens_per_patch() || s[2] != n {
        return Err(shape_err!(
            "stage {} expects [B, {}, {n}, D], got {s:?}",
            map.stage,
            map.tokens_per_patch()
        ));
    }
    let (b, d) = (s[0], s[3]);
    let flat = ctx.tape.reshape(x, &[b, map.extent * map.extent, d])?;
    let inverse: Vec<usize> = map
        .slot_of
        .iter()
        .map(|&(patch, offset)| offset * n + patch)
        .collect();
    let back = ctx.tape.index_select(flat, 1, &inverse)?;
    ctx.tape.reshape(back, &[b, map.extent, map.extent, d])
}

/// Projects and groups every included stage, concatenating deepest first.
pub fn tokenize<T: Float>(
    ctx: &mut Ctx<'_, T>,
    pyramid: &PyramidVars,
    cfg: &DuoFormerConfig,
) -> Result<MultiScaleTokens> {
    let maps = patch_index_map(cfg)?;
    let mut parts = Vec::with_capacity(maps.len());
    for m in &maps {
        let x = pyramid.get(m.stage)?;
        let y = project(ctx, x, m.stage)?;
        parts.push(group_stage(ctx, y, m)?);
    }
    let tokens = if parts.len() == 1 {
        parts[0]
    } else {
        ctx.tape.concat(&parts, 1)?
    };
    Ok(MultiScaleTokens {
        tokens,
        maps,
        has_scale_token: false,
    })
}

/// Splits `[B,S,N,D]` tokens (without a scale token) back into per-stage
/// `[B,Pᵢ,Pᵢ,D]` maps, returned in ascending stage order.
pub fn untokenize<T: Float>(
    ctx: &mut Ctx<'_, T>,
    tokens: &MultiScaleTokens,
) -> Result<Vec<(usize, Var)>> {
    let mut start = usize::from(tokens.has_scale_token);
    let mut out = Vec::new();
    for m in &tokens.maps {
        let len = m.tokens_per_patch();
        let part = ctx.tape.slice(tokens.tokens, 1, start, len)?;
        out.push((m.stage, ungroup_stage(ctx, part, m)?));
        start += len;
    }
    out.reverse();
    Ok(out)
}
