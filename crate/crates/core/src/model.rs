//! Full classifier: backbone → tokenizer → scale token → encoder → head.

use std::path::Path;

use crate::attention::{
    baseline_encoder, encoder, init_baseline, init_encoder, init_head, scale_only_encoder,
};
use crate::autograd::Var;
use crate::backbone::{init_backbone, toy_backbone_forward, FeaturePyramid, PyramidVars};
use crate::config::{AttentionMode, DuoFormerConfig};
use crate::error::{config_err, format_err, shape_err, Result};
use crate::format::{Container, Record};
use crate::nn::{Ctx, Init, Kind, Mode, ParamStore};
use crate::scale_token::{attach_scale_token, init_scale_token};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{group_stage, init_tokenizer, project, scale_len, tokenize, StageIndexMap};

/// Model input for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a, T> {
    /// Channel-last images `[B, H, H, 3]`.
    Images(&'a Tensor<T>),
    /// Precomputed feature pyramid; the backbone is skipped.
    Pyramid(&'a FeaturePyramid<T>),
}

/// Scale extent T seen by the encoder: S, plus one with a scale token.
pub fn scale_extent(cfg: &DuoFormerConfig) -> Result<usize> {
    Ok(scale_len(cfg)? + usize::from(cfg.uses_scale_token()))
}

/// Every parameter and buffer the configuration needs, in canonical order.
pub fn param_specs(cfg: &DuoFormerConfig, with_backbone: bool) -> Result<Init> {
    cfg.validate()?;
    let mut init = Init::with_linear_std(cfg.linear_std());
    if with_backbone {
        init_backbone(&mut init, cfg);
    }
    match cfg.attention_mode {
        AttentionMode::PatchOnly => {
            init_tokenizer(&mut init, cfg, &[cfg.deepest_stage()]);
            init_baseline(&mut init, cfg);
        }
        AttentionMode::Duo | AttentionMode::ScaleOnly => {
            init_tokenizer(&mut init, cfg, &cfg.stages);
            if cfg.uses_scale_token() {
                init_scale_token(&mut init, cfg)?;
            }
            init_encoder(&mut init, cfg, scale_extent(cfg)?);
        }
    }
    init_head(&mut init, cfg);
    Ok(init)
}

/// Trainable scalar counts per component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub projections: usize,
    pub scale_token: usize,
    pub encoder: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.backbone + self.projections + self.scale_token + self.encoder + self.head
    }

    fn add(&mut self, name: &str, n: usize) {
        let slot = match name.split('.').next().unwrap_or("") {
            "backbone" => &mut self.backbone,
            "tokenizer" => &mut self.projections,
            "scale_token" => &mut self.scale_token,
            "encoder" => &mut self.encoder,
            _ => &mut self.head,
        };
        *slot += n;
    }
}

/// Trainable parameter counts, computed from shapes without allocating.
pub fn count_parameters(cfg: &DuoFormerConfig, with_backbone: bool) -> Result<ParamCounts> {
    let mut counts = ParamCounts::default();
    for spec in param_specs(cfg, with_backbone)?.specs {
        if spec.kind == Kind::Param {
            counts.add(&spec.name, spec.numel());
        }
    }
    Ok(counts)
}

pub fn count_store<T: Float>(store: &ParamStore<T>) -> ParamCounts {
    let mut counts = ParamCounts::default();
    for (name, t, kind) in store.iter() {
        if kind == Kind::Param {
            counts.add(name, t.numel());
        }
    }
    counts
}

#[derive(Clone, Debug)]
pub struct DuoFormer<T: Float> {
    pub cfg: DuoFormerConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> DuoFormer<T> {
    /// Fresh model with the toy backbone, initialized from `cfg.seed`.
    pub fn new(cfg: DuoFormerConfig) -> Result<Self> {
        Self::init(cfg, true)
    }

    /// Fresh model that consumes precomputed pyramids.
    pub fn for_pyramids(cfg: DuoFormerConfig) -> Result<Self> {
        Self::init(cfg, false)
    }

    fn init(cfg: DuoFormerConfig, with_backbone: bool) -> Result<Self> {
        let params = param_specs(&cfg, with_backbone)?.materialize(cfg.seed);
        Ok(Self { cfg, params })
    }

    pub fn has_backbone(&self) -> bool {
        self.params.contains("backbone.stage0.conv1.w")
    }

    /// A forward context over this model's parameters. A frozen backbone gets
    /// no gradients and keeps its BN layers in eval mode.
    pub fn ctx(&self, mode: Mode) -> Ctx<'_, T> {
        let mut ctx = Ctx::new(&self.params, mode);
        if self.cfg.freeze_backbone {
            ctx.freeze("backbone.");
        }
        ctx
    }

    /// Records the forward pass on `ctx`, returning logits `[B, classes]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, input: Input<'_, T>) -> Result<Var> {
        let pyramid = self.pyramid_vars(ctx, input)?;
        self.forward_pyramid_vars(ctx, &pyramid)
    }

    fn pyramid_vars(&self, ctx: &mut Ctx<'_, T>, input: Input<'_, T>) -> Result<PyramidVars> {
        let cfg = &self.cfg;
        let needed: Vec<usize> = match cfg.attention_mode {
            AttentionMode::PatchOnly => vec![cfg.deepest_stage()],
            _ => cfg.stages.clone(),
        };
        match input {
            Input::Images(images) => {
                let s = images.shape();
                if s.len() != 4 || s[1] != cfg.input_size || s[2] != cfg.input_size || s[3] != 3 {
                    return Err(shape_err!(
                        "images must be [B, {h}, {h}, 3], got {s:?}",
                        h = cfg.input_size
                    ));
                }
                let x = ctx.input(images);
                let x = ctx.tape.permute(x, &[0, 3, 1, 2])?;
                toy_backbone_forward(ctx, x, &needed)
            }
            Input::Pyramid(p) => {
                if p.input_size != cfg.input_size {
                    return Err(shape_err!(
                        "pyramid was built for H={} but the model expects H={}",
                        p.input_size,
                        cfg.input_size
                    ));
                }
                let vars = PyramidVars::from_pyramid(ctx, p)?;
                for &s in &needed {
                    vars.get(s)?;
                }
                Ok(vars)
            }
        }
    }

    /// Eval-mode multi-scale tokens `[B, S, N, D]` (no scale token) and the
    /// per-stage index maps, deepest stage first.
    pub fn tokens(&self, input: Input<'_, T>) -> Result<(Tensor<T>, Vec<StageIndexMap>)> {
        if self.cfg.attention_mode == AttentionMode::PatchOnly {
            return Err(config_err!(
                "patch_only models project the deepest stage only and have no multi-scale tokens"
            ));
        }
        let mut ctx = self.ctx(Mode::Eval);
        let pyramid = self.pyramid_vars(&mut ctx, input)?;
        let tokens = tokenize(&mut ctx, &pyramid, &self.cfg)?;
        Ok((ctx.tape.tensor(tokens.tokens), tokens.maps))
    }

    fn forward_pyramid_vars(&self, ctx: &mut Ctx<'_, T>, pyramid: &PyramidVars) -> Result<Var> {
        let cfg = &self.cfg;
        let pooled_input = match cfg.attention_mode {
            AttentionMode::PatchOnly => {
                let deepest = cfg.deepest_stage();
                let map = StageIndexMap::new(cfg.input_size, cfg.patch_count, deepest)?;
                let y = project(ctx, pyramid.get(deepest)?, deepest)?;
                let g = group_stage(ctx, y, &map)?;
                let patches = ctx.tape.mean(g, 1)?;
                baseline_encoder(ctx, patches, cfg)?
            }
            AttentionMode::Duo | AttentionMode::ScaleOnly => {
                let tokens = tokenize(ctx, pyramid, cfg)?;
                let tokens = attach_scale_token(ctx, tokens, pyramid, cfg)?;
                if cfg.attention_mode == AttentionMode::Duo {
                    encoder(ctx, &tokens, cfg)?
                } else {
                    scale_only_encoder(ctx, &tokens, cfg)?
                }
            }
        };
        let pooled = ctx.tape.mean(pooled_input, 1)?;
        ctx.linear(pooled, "head")
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, input: Input<'_, T>) -> Result<Tensor<T>> {
        let mut ctx = self.ctx(Mode::Eval);
        let out = self.forward(&mut ctx, input)?;
        Ok(ctx.tape.tensor(out))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert("config", Record::text(&self.cfg.to_text()));
        for (name, t, _) in self.params.iter() {
            c.insert(name, Record::from_float(t));
        }
        c
    }

    /// Rebuilds a model from a checkpoint container. Every expected tensor
    /// must be present with the expected shape.
    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = DuoFormerConfig::from_text(&c.require("config")?.as_text()?)?;
        cfg.validate()?;
        let with_backbone = c.get("backbone.stage0.conv1.w").is_some();
        let specs = param_specs(&cfg, with_backbone)?;
        let mut params = ParamStore::new();
        for spec in &specs.specs {
            let r = c.require(&spec.name)?;
            let t: Tensor<T> = r.to_float()?;
            if t.shape() != spec.shape.as_slice() {
                return Err(format_err!(
                    "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ));
            }
            params.insert(spec.name.clone(), t, spec.kind);
        }
        let expected = specs.specs.len() + 1;
        if c.len() != expected {
            let extra: Vec<&String> = c
                .iter()
                .map(|(n, _)| n)
                .filter(|n| *n != "config" && !params.contains(n))
                .collect();
            return Err(format_err!("checkpoint has unexpected entries {extra:?}"));
        }
        Ok(Self { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn cast<U: Float>(&self) -> DuoFormer<U> {
        DuoFormer {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }
}
