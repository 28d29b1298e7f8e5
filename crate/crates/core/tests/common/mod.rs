#![allow(dead_code)]

use duoformer::config::DuoFormerConfig;
use duoformer::rng::Rng;
use duoformer::{Float, Tensor};

pub fn rand_tensor<T: Float>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform(-1.0, 1.0)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rand_images<T: Float>(b: usize, h: usize, rng: &mut Rng) -> Tensor<T> {
    let data = (0..b * h * h * 3)
        .map(|_| T::from_f64(rng.uniform(0.0, 1.0)))
        .collect();
    Tensor::new(&[b, h, h, 3], data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn toy_f64() -> DuoFormerConfig {
    DuoFormerConfig {
        dtype: duoformer::DType::F64,
        ..DuoFormerConfig::toy()
    }
}

/// Canonical geometry at a small width so forward passes stay cheap.
pub fn canonical_small() -> DuoFormerConfig {
    DuoFormerConfig {
        embed_dim: 16,
        heads: 4,
        layers: 1,
        channels: [4, 4, 8, 8],
        num_classes: 3,
        baseline_layers: 1,
        dtype: duoformer::DType::F64,
        ..DuoFormerConfig::default()
    }
}

/// x · W + b for a row vector `x` and `W: [in, out]`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

/// Per-pair attention over one sequence `x: [T][D]`, returning the output
/// rows and the weights `[h][T][T]`.
pub fn naive_msa(
    x: &[Vec<f64>],
    heads: usize,
    qkv_w: &[f64],
    qkv_b: &[f64],
    proj_w: &[f64],
    proj_b: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let qkv: Vec<Vec<f64>> = x.iter().map(|r| affine(r, qkv_w, qkv_b)).collect();
    let mut concat = vec![vec![0.0; d]; t];
    let mut weights = vec![vec![vec![0.0; t]; t]; heads];
    for h in 0..heads {
        for i in 0..t {
            let q = &qkv[i][h * dh..(h + 1) * dh];
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let k = &qkv[j][d + h * dh..d + (h + 1) * dh];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                let w = e[j] / z;
                weights[h][i][j] = w;
                for c in 0..dh {
                    concat[i][h * dh + c] += w * qkv[j][2 * d + h * dh + c];
                }
            }
        }
    }
    let out = concat.iter().map(|r| affine(r, proj_w, proj_b)).collect();
    (out, weights)
}

use duoformer::backbone::{FeaturePyramid, PyramidVars};
use duoformer::nn::{Ctx, Kind, Mode, ParamStore};
use duoformer::tokenizer::{patch_index_map, tokenize};

/// Projection weights that copy features unchanged (`C = D`).
pub fn identity_projections(stages: &[usize], d: usize) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for &s in stages {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        store.insert(format!("tokenizer.stage{s}.w"), w, Kind::Param);
        store.insert(
            format!("tokenizer.stage{s}.b"),
            Tensor::zeros(&[d]),
            Kind::Param,
        );
    }
    store
}

/// Unique code for channel `c` of position `pos` in stage `s` of sample `b`.
pub fn sentinel(b: usize, s: usize, pos: usize, c: usize) -> f64 {
    (((b * 4 + s) * 100_000 + pos) * 16 + c) as f64
}

/// Tokenizes a pyramid whose every feature is a unique sentinel through
/// identity projections, and checks each projected vector lands exactly
/// once, at the slot the index map predicts.
pub fn check_bijection(cfg: &DuoFormerConfig, batch: usize) -> Result<(), String> {
    let d = cfg.embed_dim;
    let mut pyr = FeaturePyramid::new(cfg.input_size);
    for &s in &cfg.stages {
        let p = cfg.input_size / (4 << s);
        let mut data = Vec::with_capacity(batch * p * p * d);
        for b in 0..batch {
            for pos in 0..p * p {
                for c in 0..d {
                    data.push(sentinel(b, s, pos, c));
                }
            }
        }
        pyr = pyr.with_stage(s, Tensor::new(&[batch, p, p, d], data).unwrap());
    }
    let store = identity_projections(&cfg.stages, d);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let vars = PyramidVars::from_pyramid(&mut ctx, &pyr).map_err(|e| e.to_string())?;
    let toks = tokenize(&mut ctx, &vars, cfg).map_err(|e| e.to_string())?;
    let t = ctx.tape.tensor(toks.tokens);
    let shape = t.shape().to_vec();
    let (s_len, n) = (shape[1], shape[2]);
    let maps = patch_index_map(cfg).map_err(|e| e.to_string())?;
    let expected_s: usize = maps.iter().map(|m| m.block * m.block).sum();
    if s_len != expected_s || n != cfg.patch_count {
        return Err(format!("token shape {shape:?}, expected S={expected_s}"));
    }
    // Where every token came from, decoded from its first channel.
    let mut seen = std::collections::HashMap::new();
    for b in 0..batch {
        for si in 0..s_len {
            for p in 0..n {
                let base = ((b * s_len + si) * n + p) * d;
                let v = &t.data()[base..base + d];
                let code = v[0] as usize / 16;
                for (c, x) in v.iter().enumerate() {
                    if *x as usize != code * 16 + c {
                        return Err(format!("token ({b},{si},{p}) mixes channels"));
                    }
                }
                if seen.insert(code, (b, si, p)).is_some() {
                    return Err(format!("feature {code} appears twice"));
                }
            }
        }
    }
    let mut start = 0;
    for m in &maps {
        for b in 0..batch {
            for (pos, &(patch, offset)) in m.slot_of.iter().enumerate() {
                let code = sentinel(b, m.stage, pos, 0) as usize / 16;
                let want = (b, start + offset, patch);
                match seen.get(&code) {
                    Some(&got) if got == want => {}
                    got => {
                        return Err(format!(
                            "stage {} position {pos}: expected slot {want:?}, found {got:?}",
                            m.stage
                        ))
                    }
                }
            }
        }
        start += m.block * m.block;
    }
    if seen.len() != batch * s_len * n {
        return Err("token count mismatch".into());
    }
    Ok(())
}

/// A random valid geometry: grid side in {1,2,3,4,7}, deepest stage 3 with
/// one or two tokens per side, and a random nonempty stage subset.
pub fn random_geometry(rng: &mut Rng) -> DuoFormerConfig {
    let grid = [1, 2, 3, 4, 7][rng.below(5)];
    let k = 1 + rng.below(2);
    let h = 32 * grid * k;
    let mut stages: Vec<usize> = (0..4).filter(|_| rng.below(2) == 1).collect();
    if stages.is_empty() {
        stages.push(rng.below(4));
    }
    DuoFormerConfig {
        input_size: h,
        patch_count: grid * grid,
        embed_dim: 2 + rng.below(3),
        heads: 1,
        stages,
        ..DuoFormerConfig::default()
    }
}

use duoformer::attention::{init_msa, msa_with_weights};
use duoformer::nn::Init;

/// MSA parameters under prefix `m`, with random (nonzero) biases.
pub fn msa_store(d: usize, seed: u64) -> ParamStore<f64> {
    let mut init = Init::with_linear_std(0.3);
    init_msa(&mut init, "m", d);
    let mut store = init.materialize::<f64>(seed);
    let mut rng = Rng::new(seed).fork("bias");
    for name in ["m.qkv.b", "m.proj.b"] {
        let t = store.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    store
}

/// Batched MSA against the per-pair oracle over every leading index of
/// `shape = [..., T, D]`. Returns (max |difference|, max |row sum − 1|).
pub fn msa_oracle_check(shape: &[usize], heads: usize, seed: u64) -> (f64, f64) {
    let r = shape.len();
    let (t, d) = (shape[r - 2], shape[r - 1]);
    let store = msa_store(d, seed);
    let x = rand_tensor::<f64>(shape, &mut Rng::new(seed).fork("x"));
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let xv = ctx.input(&x);
    let (out, attn) = msa_with_weights(&mut ctx, xv, "m", heads).unwrap();
    let (out, attn) = (ctx.tape.value(out).to_vec(), ctx.tape.value(attn).to_vec());
    let p = |n: &str| store.get(n).unwrap().data().to_vec();
    let (qw, qb, pw, pb) = (p("m.qkv.w"), p("m.qkv.b"), p("m.proj.w"), p("m.proj.b"));
    let mut diff: f64 = 0.0;
    let mut row_dev: f64 = 0.0;
    for (seq_i, seq) in x.data().chunks(t * d).enumerate() {
        let rows: Vec<Vec<f64>> = seq.chunks(d).map(|c| c.to_vec()).collect();
        let (want, weights) = naive_msa(&rows, heads, &qw, &qb, &pw, &pb);
        let got = &out[seq_i * t * d..(seq_i + 1) * t * d];
        diff = diff.max(max_abs_diff(&want.concat(), got));
        let got_w = &attn[seq_i * heads * t * t..(seq_i + 1) * heads * t * t];
        let want_w: Vec<f64> = weights.into_iter().flatten().flatten().collect();
        diff = diff.max(max_abs_diff(&want_w, got_w));
        for row in got_w.chunks(t) {
            row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    (diff, row_dev)
}

use duoformer::attention::{encoder, init_block, init_encoder};
use duoformer::tokenizer::MultiScaleTokens;

pub fn block_store(d: usize, seed: u64) -> ParamStore<f64> {
    let mut init = Init::with_linear_std(0.3);
    init_block(&mut init, "blk", d);
    let mut store = init.materialize::<f64>(seed);
    let mut rng = Rng::new(seed).fork("affine");
    for (name, t, _) in store.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
    }
    store
}

pub fn scale_tokens(
    ctx: &mut Ctx<'_, f64>,
    x: &Tensor<f64>,
    cfg: &DuoFormerConfig,
) -> MultiScaleTokens {
    MultiScaleTokens {
        tokens: ctx.input(x),
        maps: patch_index_map(cfg).unwrap(),
        has_scale_token: true,
    }
}

pub fn encoder_setup<T: Float>(cfg: &DuoFormerConfig, t: usize, seed: u64) -> ParamStore<T> {
    let mut init = Init::with_linear_std(0.2);
    init_encoder(&mut init, cfg, t);
    init.materialize(seed)
}

pub fn run_encoder<T: Float>(
    store: &ParamStore<T>,
    cfg: &DuoFormerConfig,
    x: &Tensor<T>,
) -> Vec<T> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let toks = MultiScaleTokens {
        tokens: ctx.input(x),
        maps: patch_index_map(cfg).unwrap(),
        has_scale_token: true,
    };
    let y = encoder(&mut ctx, &toks, cfg).unwrap();
    ctx.tape.value(y).to_vec()
}

pub fn permute_axis<T: Float>(x: &Tensor<T>, axis: usize, perm: &[usize]) -> Tensor<T> {
    let s = x.shape().to_vec();
    let inner: usize = s[axis + 1..].iter().product();
    let outer: usize = s[..axis].iter().product();
    let mut data = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for &p in perm {
            let start = (o * s[axis] + p) * inner;
            data.extend_from_slice(&x.data()[start..start + inner]);
        }
    }
    Tensor::new(&s, data).unwrap()
}
