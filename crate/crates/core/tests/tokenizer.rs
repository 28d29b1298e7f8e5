mod common;

use common::{
    canonical_small, check_bijection, identity_projections, rand_tensor, random_geometry,
};
use duoformer::backbone::{FeaturePyramid, PyramidVars};
use duoformer::config::DuoFormerConfig;
use duoformer::nn::{Ctx, Init, Mode};
use duoformer::rng::Rng;
use duoformer::tokenizer::{
    init_tokenizer, patch_index_map, project, scale_len, tokenize, untokenize, StageIndexMap,
};
use duoformer::Error;
use proptest::prelude::*;

#[test]
fn canonical_tokens_per_patch() {
    let cfg = DuoFormerConfig::default();
    let maps = patch_index_map(&cfg).unwrap();
    let per: Vec<(usize, usize)> = maps
        .iter()
        .map(|m| (m.stage, m.tokens_per_patch()))
        .collect();
    assert_eq!(per, vec![(3, 1), (2, 4), (1, 16), (0, 64)]);
    assert_eq!(scale_len(&cfg).unwrap(), 85);
}

#[test]
fn toy_geometry() {
    let cfg = DuoFormerConfig::toy();
    let sides: Vec<usize> = patch_index_map(&cfg)
        .unwrap()
        .iter()
        .map(|m| m.block)
        .collect();
    assert_eq!(sides, vec![1, 2, 4]);
    assert_eq!(scale_len(&cfg).unwrap(), 21);
    match StageIndexMap::new(32, 4, 3) {
        Err(Error::Config(m)) => assert!(m.contains("stage 3"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_square_patch_count_is_rejected() {
    assert!(matches!(
        StageIndexMap::new(224, 48, 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn one_token_per_patch_is_the_identity_grid() {
    // H=224, N=49, stage 3: P=7=√N
    let m = StageIndexMap::new(224, 49, 3).unwrap();
    assert_eq!(m.block, 1);
    for (pos, &(patch, offset)) in m.slot_of.iter().enumerate() {
        assert_eq!((patch, offset), (pos, 0));
    }
}

#[test]
fn identity_projection_keeps_features() {
    let store = identity_projections(&[2], 5);
    let x = rand_tensor::<f64>(&[2, 3, 3, 5], &mut Rng::new(0));
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let v = ctx.input(&x);
    let y = project(&mut ctx, v, 2).unwrap();
    assert_eq!(ctx.tape.value(y), x.data());
}

#[test]
fn projection_matches_per_position_matmul() {
    let cfg = DuoFormerConfig {
        channels: [6, 8, 8, 8],
        embed_dim: 4,
        heads: 1,
        ..DuoFormerConfig::default()
    };
    let mut init = Init::new();
    init_tokenizer(&mut init, &cfg, &[0]);
    let mut store = init.materialize::<f64>(1);
    let b = rand_tensor::<f64>(&[4], &mut Rng::new(2));
    *store.get_mut("tokenizer.stage0.b").unwrap() = b.clone();
    let x = rand_tensor::<f64>(&[2, 56, 56, 6], &mut Rng::new(3));
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let v = ctx.input(&x);
    let y = project(&mut ctx, v, 0).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 56, 56, 4]);
    let w = store.get("tokenizer.stage0.w").unwrap().data();
    let y = ctx.tape.value(y);
    for (row, out) in x.data().chunks(6).zip(y.chunks(4)) {
        let want = common::affine(row, w, b.data());
        assert!(common::max_abs_diff(&want, out) <= 1e-12);
    }
}

#[test]
fn missing_projection_is_a_config_error() {
    let store = identity_projections(&[1], 4);
    let x = rand_tensor::<f64>(&[1, 2, 2, 4], &mut Rng::new(0));
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let v = ctx.input(&x);
    assert!(matches!(project(&mut ctx, v, 3), Err(Error::Config(_))));
}

#[test]
fn canonical_token_shape() {
    let cfg = canonical_small();
    let mut init = Init::new();
    init_tokenizer(&mut init, &cfg, &cfg.stages);
    let store = init.materialize::<f64>(0);
    let mut rng = Rng::new(4);
    let mut pyr = FeaturePyramid::new(224);
    for s in 0..4 {
        let p = 224 / (4 << s);
        pyr = pyr.with_stage(s, rand_tensor(&[1, p, p, cfg.channels[s]], &mut rng));
    }
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let vars = PyramidVars::from_pyramid(&mut ctx, &pyr).unwrap();
    let t = tokenize(&mut ctx, &vars, &cfg).unwrap();
    assert_eq!(ctx.tape.shape(t.tokens), &[1, 85, 49, 16]);
    assert!(!t.has_scale_token);
}

#[test]
fn sentinels_land_at_predicted_slots() {
    check_bijection(
        &DuoFormerConfig {
            embed_dim: 3,
            ..DuoFormerConfig::toy()
        },
        2,
    )
    .unwrap();
    check_bijection(
        &DuoFormerConfig {
            embed_dim: 2,
            heads: 1,
            ..DuoFormerConfig::default()
        },
        1,
    )
    .unwrap();
}

#[test]
fn tokenize_then_untokenize_is_exact() {
    let mut rng = Rng::new(11);
    for _ in 0..10 {
        let cfg = random_geometry(&mut rng);
        let d = cfg.embed_dim;
        let store = identity_projections(&cfg.stages, d);
        let mut pyr = FeaturePyramid::new(cfg.input_size);
        for &s in &cfg.stages {
            let p = cfg.input_size / (4 << s);
            pyr = pyr.with_stage(s, rand_tensor::<f64>(&[2, p, p, d], &mut rng));
        }
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let vars = PyramidVars::from_pyramid(&mut ctx, &pyr).unwrap();
        let toks = tokenize(&mut ctx, &vars, &cfg).unwrap();
        let back = untokenize(&mut ctx, &toks).unwrap();
        assert_eq!(back.len(), cfg.stages.len());
        for (s, v) in back {
            assert_eq!(
                ctx.tape.value(v),
                pyr.stages[s].as_ref().unwrap().data(),
                "stage {s}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every patch's tokens, scaled back to input pixels, tile the same
    /// H/√N square for every stage.
    #[test]
    fn patches_cover_aligned_regions(grid in 1usize..=4, k in 1usize..=2, stage in 0usize..4) {
        let h = 32 * grid * k;
        let n = grid * grid;
        let m = StageIndexMap::new(h, n, stage).unwrap();
        let cell = 4 << stage;
        let side = h / grid;
        let mut area = vec![0usize; n];
        for (pos, &(patch, _)) in m.slot_of.iter().enumerate() {
            let (y, x) = (pos / m.extent * cell, pos % m.extent * cell);
            let (py, px) = (patch / grid * side, patch % grid * side);
            prop_assert!(y >= py && y + cell <= py + side);
            prop_assert!(x >= px && x + cell <= px + side);
            area[patch] += cell * cell;
        }
        prop_assert!(area.iter().all(|&a| a == side * side));
    }

    #[test]
    fn scale_len_matches_layout(grid in 1usize..=4, k in 1usize..=3, mask in 1u8..16) {
        let stages: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
        let cfg = DuoFormerConfig {
            input_size: 32 * grid * k,
            patch_count: grid * grid,
            stages: stages.clone(),
            ..DuoFormerConfig::default()
        };
        let want: usize = stages.iter().map(|&s| (k << (3 - s)).pow(2)).sum();
        prop_assert_eq!(scale_len(&cfg).unwrap(), want);
    }
}
