//! Model and training configuration, plus the plain-text `key=value` run file.

use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::tensor::DType;

/// How the scale token at scale index 0 is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleTokenMode {
    /// Downsample every stage to the patch grid, concat channels, fuse with Conv+BN+ReLU.
    Fused,
    /// A free parameter broadcast over the batch.
    Learnable,
    /// No scale token.
    None,
}

/// What feeds the classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Readout {
    /// Mean over patches of the final patch-attention output.
    ScaleTokenPatchAttn,
    /// First scale entry (the deepest stage's token); no scale token.
    FirstToken,
    /// Mean over scale entries; no scale token.
    AvgTokens,
    /// Scale-token slice after scale attention alone, mean over patches, one FC layer.
    ScaleAttnOnlyFc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Duo,
    ScaleOnly,
    PatchOnly,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $ty {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

pub(crate) use keyword_enum;

keyword_enum!(ScaleTokenMode { Fused => "fused", Learnable => "learnable", None => "none" });
keyword_enum!(Readout {
    ScaleTokenPatchAttn => "scale_token_patch_attn",
    FirstToken => "first_token",
    AvgTokens => "avg_tokens",
    ScaleAttnOnlyFc => "scale_attn_only_fc",
});
keyword_enum!(AttentionMode { Duo => "duo", ScaleOnly => "scale_only", PatchOnly => "patch_only" });

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DuoFormerConfig {
    /// Input side length H (= W) in pixels.
    pub input_size: usize,
    /// Patches per stage N; must be a perfect square.
    pub patch_count: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Duo layers L (scale-only: scale blocks).
    pub layers: usize,
    /// Included backbone stages, strictly increasing, from {0,1,2,3}.
    pub stages: Vec<usize>,
    /// Toy backbone channel widths per stage.
    pub channels: [usize; 4],
    pub scale_token_mode: ScaleTokenMode,
    pub readout: Readout,
    pub attention_mode: AttentionMode,
    pub num_classes: usize,
    pub scale_pos: bool,
    pub patch_pos: bool,
    pub dtype: DType,
    pub seed: u64,
    /// Standard transformer blocks used by the patch-only baseline.
    pub baseline_layers: usize,
    /// Frozen backbone: no gradients and BN in eval mode.
    pub freeze_backbone: bool,
    /// Std of truncated-normal linear weights; `None` scales 0.02 with width.
    pub init_std: Option<f64>,
}

impl Default for DuoFormerConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            patch_count: 49,
            embed_dim: 768,
            heads: 8,
            layers: 6,
            stages: vec![0, 1, 2, 3],
            channels: [64, 128, 256, 512],
            scale_token_mode: ScaleTokenMode::Fused,
            readout: Readout::ScaleTokenPatchAttn,
            attention_mode: AttentionMode::Duo,
            num_classes: 4,
            scale_pos: true,
            patch_pos: true,
            dtype: DType::F32,
            seed: 0,
            baseline_layers: 12,
            freeze_backbone: false,
            init_std: None,
        }
    }
}

impl DuoFormerConfig {
    /// Small geometry used for gradient checks and desk-scale training.
    pub fn toy() -> Self {
        Self {
            input_size: 32,
            patch_count: 4,
            embed_dim: 16,
            heads: 4,
            layers: 2,
            stages: vec![0, 1, 2],
            channels: [8, 16, 32, 64],
            baseline_layers: 2,
            ..Self::default()
        }
    }

    /// √N.
    pub fn patch_side(&self) -> usize {
        isqrt(self.patch_count)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn linear_std(&self) -> f64 {
        self.init_std
            .unwrap_or_else(|| crate::nn::width_scaled_std(self.embed_dim))
    }

    pub fn deepest_stage(&self) -> usize {
        *self.stages.last().expect("validated config has stages")
    }

    pub fn uses_scale_token(&self) -> bool {
        self.attention_mode != AttentionMode::PatchOnly
            && self.scale_token_mode != ScaleTokenMode::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_count == 0 || isqrt(self.patch_count).pow(2) != self.patch_count {
            return Err(config_err!(
                "patch_count N={} is not a perfect square",
                self.patch_count
            ));
        }
        if self.stages.is_empty() {
            return Err(config_err!("at least one stage must be included"));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) || self.stages.iter().any(|&s| s > 3) {
            return Err(config_err!(
                "stages {:?} must be strictly increasing values in 0..=3",
                self.stages
            ));
        }
        for &s in &self.stages {
            stage_tokens_side(self.input_size, self.patch_count, s)?;
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(config_err!(
                "embed_dim D={} is not divisible by heads h={}",
                self.embed_dim,
                self.heads
            ));
        }
        if self.layers == 0 {
            return Err(config_err!("layers must be at least 1"));
        }
        if self.attention_mode == AttentionMode::PatchOnly && self.baseline_layers == 0 {
            return Err(config_err!("baseline_layers must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(config_err!("channel widths must be positive"));
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err!("init_std must be positive, got {s}"));
            }
        }
        if self.dtype == DType::I64 {
            return Err(config_err!("dtype must be f32 or f64"));
        }
        use AttentionMode::*;
        use Readout::*;
        use ScaleTokenMode as M;
        let ok = match (self.attention_mode, self.scale_token_mode, self.readout) {
            (Duo, M::Fused | M::Learnable, ScaleTokenPatchAttn) => true,
            (ScaleOnly, M::Fused | M::Learnable, ScaleAttnOnlyFc) => true,
            (Duo | ScaleOnly, M::None, FirstToken | AvgTokens) => true,
            (PatchOnly, _, ScaleTokenPatchAttn) => true,
            _ => false,
        };
        if !ok {
            return Err(config_err!(
                "readout `{}` is not valid with attention_mode `{}` and scale_token_mode `{}`",
                self.readout,
                self.attention_mode,
                self.scale_token_mode
            ));
        }
        Ok(())
    }
}

pub(crate) fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Spatial extent Pᵢ = H / (4·2ⁱ) of stage `i`, if integral.
pub fn stage_extent(input_size: usize, stage: usize) -> Option<usize> {
    let div = 4usize << stage;
    (input_size % div == 0 && input_size >= div).then(|| input_size / div)
}

/// Per-patch block side P′ᵢ = H / (4·2ⁱ·√N); errors name the violating stage.
pub fn stage_tokens_side(input_size: usize, patch_count: usize, stage: usize) -> Result<usize> {
    let side = isqrt(patch_count);
    if side * side != patch_count || side == 0 {
        return Err(config_err!(
            "patch_count N={patch_count} is not a perfect square"
        ));
    }
    if stage > 3 {
        return Err(config_err!(
            "stage {stage} does not exist (stages are 0..=3)"
        ));
    }
    let div = (4usize << stage) * side;
    if input_size % div != 0 || input_size < div {
        return Err(config_err!(
            "stage {stage} violates P'_i integrality: H/(4*2^{stage}*sqrt(N)) = {input_size}/{div} is not a positive integer"
        ));
    }
    Ok(input_size / div)
}

/// Optimizer, schedule and early-stopping parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            patience: 20,
            max_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("batch_size and max_epochs must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(config_err!(
                "patience {} exceeds max_epochs {}",
                self.patience,
                self.max_epochs
            ));
        }
        if !(self.max_lr > 0.0) {
            return Err(config_err!("max_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        if self.weight_decay != 0.0 {
            return Err(config_err!(
                "weight_decay must be 0; the optimizer applies none"
            ));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(config_err!("pct_start must lie in (0, 1)"));
        }
        if !(self.div_factor >= 1.0 && self.final_div_factor >= 1.0) {
            return Err(config_err!("div_factor and final_div_factor must be >= 1"));
        }
        Ok(())
    }
}

/// Combined contents of a run configuration file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: DuoFormerConfig,
    pub train: TrainConfig,
}

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| config_err!("`{key}`: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("`{key}`: expected true/false, got `{v}`")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(vec![]);
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "input_size",
        "patch_count",
        "embed_dim",
        "heads",
        "layers",
        "stages",
        "channels",
        "scale_token_mode",
        "readout",
        "attention_mode",
        "num_classes",
        "scale_pos",
        "patch_pos",
        "dtype",
        "seed",
        "baseline_layers",
        "freeze_backbone",
        "init_std",
        "batch_size",
        "max_epochs",
        "patience",
        "max_lr",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "pct_start",
        "div_factor",
        "final_div_factor",
        "train_seed",
    ];

    /// Keys belonging to the model architecture (the rest configure training).
    pub const MODEL_KEYS: usize = 18;

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "input_size" => m.input_size = parse_num(key, v)?,
            "patch_count" => m.patch_count = parse_num(key, v)?,
            "embed_dim" => m.embed_dim = parse_num(key, v)?,
            "heads" => m.heads = parse_num(key, v)?,
            "layers" => m.layers = parse_num(key, v)?,
            "stages" => m.stages = parse_list(key, v)?,
            "channels" => {
                let c = parse_list(key, v)?;
                m.channels = c.try_into().map_err(|_| {
                    config_err!("`channels` needs exactly 4 comma-separated widths")
                })?;
            }
            "scale_token_mode" => m.scale_token_mode = v.parse()?,
            "readout" => m.readout = v.parse()?,
            "attention_mode" => m.attention_mode = v.parse()?,
            "num_classes" => m.num_classes = parse_num(key, v)?,
            "scale_pos" => m.scale_pos = parse_bool(key, v)?,
            "patch_pos" => m.patch_pos = parse_bool(key, v)?,
            "dtype" => {
                m.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(config_err!("`dtype`: expected f32 or f64, got `{v}`")),
                }
            }
            "seed" => m.seed = parse_num(key, v)?,
            "baseline_layers" => m.baseline_layers = parse_num(key, v)?,
            "freeze_backbone" => m.freeze_backbone = parse_bool(key, v)?,
            "init_std" => {
                m.init_std = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "max_epochs" => t.max_epochs = parse_num(key, v)?,
            "patience" => t.patience = parse_num(key, v)?,
            "max_lr" => t.max_lr = parse_num(key, v)?,
            "beta1" => t.beta1 = parse_num(key, v)?,
            "beta2" => t.beta2 = parse_num(key, v)?,
            "adam_eps" => t.adam_eps = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "pct_start" => t.pct_start = parse_num(key, v)?,
            "div_factor" => t.div_factor = parse_num(key, v)?,
            "final_div_factor" => t.final_div_factor = parse_num(key, v)?,
            "train_seed" => t.seed = parse_num(key, v)?,
            other => return Err(config_err!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(text, Self::default())
    }

    pub fn parse_over(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key=value", lineno + 1))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| config_err!("line {}: {}", lineno + 1, strip(e)))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn serialize(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        put("input_size", m.input_size.to_string());
        put("patch_count", m.patch_count.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("heads", m.heads.to_string());
        put("layers", m.layers.to_string());
        put("stages", join(&m.stages));
        put("channels", join(&m.channels));
        put("scale_token_mode", m.scale_token_mode.to_string());
        put("readout", m.readout.to_string());
        put("attention_mode", m.attention_mode.to_string());
        put("num_classes", m.num_classes.to_string());
        put("scale_pos", m.scale_pos.to_string());
        put("patch_pos", m.patch_pos.to_string());
        put("dtype", m.dtype.name().to_string());
        put("seed", m.seed.to_string());
        put("baseline_layers", m.baseline_layers.to_string());
        put("freeze_backbone", m.freeze_backbone.to_string());
        put(
            "init_std",
            m.init_std.map_or("auto".to_string(), |s| format!("{s:?}")),
        );
        put("batch_size", t.batch_size.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("max_lr", format!("{:?}", t.max_lr));
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("adam_eps", format!("{:?}", t.adam_eps));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("pct_start", format!("{:?}", t.pct_start));
        put("div_factor", format!("{:?}", t.div_factor));
        put("final_div_factor", format!("{:?}", t.final_div_factor));
        put("train_seed", t.seed.to_string());
        out
    }
}

impl DuoFormerConfig {
    /// `key=value` text of the architecture keys, as stored in checkpoints.
    pub fn to_text(&self) -> String {
        let full = RunConfig {
            model: self.clone(),
            train: TrainConfig::default(),
        }
        .serialize();
        full.lines()
            .take(RunConfig::MODEL_KEYS)
            .map(|l| format!("{l}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key=value", lineno + 1))?;
            let k = k.trim();
            if !RunConfig::KEYS[..RunConfig::MODEL_KEYS].contains(&k) {
                return Err(config_err!("line {}: `{k}` is not a model key", lineno + 1));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg.model)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
