use duoformer::autograd::{BnMode, Tape};
use duoformer::gradcheck::grad_check;
use duoformer::rng::Rng;
use duoformer::{Error, Tensor};
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// ---------- oracles ----------

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += x[(c * h + iy as usize) * wd + ix as usize]
                                * w[((o * cin + c) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

// ---------- matmul ----------

#[test]
fn matmul_identity_and_selector() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(&Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = t.constant(&Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    let sel = t.constant(&Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
    let b = t.constant(&Tensor::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap());
    let y = t.matmul(sel, b).unwrap();
    assert_eq!(t.value(y), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(11);
    for _ in 0..5 {
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(&a), t.constant(&b));
        let y = t.matmul(va, vb).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), 3, 4, 2);
        assert!(close(t.value(y), &oracle, 1e-12));
    }
}

#[test]
fn matmul_batched_broadcast_matches_loop() {
    let mut rng = Rng::new(12);
    let a = rand_tensor(&[2, 3, 4, 5], &mut rng);
    let b = rand_tensor(&[5, 2], &mut rng);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(&a), t.constant(&b));
    let y = t.matmul(va, vb).unwrap();
    assert_eq!(t.shape(y), &[2, 3, 4, 2]);
    for batch in 0..6 {
        let oracle = naive_matmul(&a.data()[batch * 20..(batch + 1) * 20], b.data(), 4, 5, 2);
        assert!(close(
            &t.value(y)[batch * 8..(batch + 1) * 8],
            &oracle,
            1e-12
        ));
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(&Tensor::zeros(&[2, 3]));
    let b = t.constant(&Tensor::zeros(&[4, 2]));
    match t.matmul(a, b) {
        Err(Error::Shape(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}")
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

// ---------- softmax ----------

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y), &[0.5, 0.5]);
    let x = t.constant(&Tensor::from_f64(&[2], &[2f64.ln(), 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert!(close(t.value(y), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    let x = t.constant(&Tensor::from_f64(&[2], &[1000.0, 1000.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one_at_large_magnitude() {
    let mut rng = Rng::new(5);
    let x64: Vec<f64> = (0..6 * 7).map(|_| rng.uniform(-1e4, 1e4)).collect();
    let mut t = Tape::<f64>::new();
    let v = t.constant(&Tensor::new(&[6, 7], x64.clone()).unwrap());
    let y = t.softmax(v, 1).unwrap();
    for row in t.value(y).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut t32 = Tape::<f32>::new();
    let v = t32.constant(&Tensor::new(&[6, 7], x64.iter().map(|&v| v as f32).collect()).unwrap());
    let y = t32.softmax(v, 1).unwrap();
    for row in t32.value(y).chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

// ---------- layer norm ----------

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let g = t.constant(&Tensor::ones(&[2]));
    let b = t.constant(&Tensor::zeros(&[2]));
    let x = t.constant(&Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-6).unwrap();
    assert!(close(t.value(y), &[1.0, -1.0], 1e-5));
    let x = t.constant(&Tensor::from_f64(&[2], &[5.0, 5.0]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-6).unwrap();
    assert_eq!(t.value(y), &[0.0, 0.0]);
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut rng = Rng::new(21);
    let x = rand_tensor(&[8], &mut rng);
    let gamma = rand_tensor(&[8], &mut rng);
    let beta = rand_tensor(&[8], &mut rng);
    let mean = x.data().iter().sum::<f64>() / 8.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    let oracle: Vec<f64> = (0..8)
        .map(|i| (x.data()[i] - mean) / (var + 1e-6).sqrt() * gamma.data()[i] + beta.data()[i])
        .collect();
    let mut t = Tape::new();
    let (vx, vg, vb) = (t.constant(&x), t.constant(&gamma), t.constant(&beta));
    let y = t.layer_norm(vx, vg, vb, 1e-6).unwrap();
    assert!(close(t.value(y), &oracle, 1e-10));
}

// ---------- conv2d ----------

#[test]
fn conv_identity_and_summation() {
    let mut rng = Rng::new(1);
    let x = rand_tensor(&[1, 1, 4, 4], &mut rng);
    let mut t = Tape::new();
    let vx = t.constant(&x);
    let w = t.constant(&Tensor::ones(&[1, 1, 1, 1]));
    let y = t.conv2d(vx, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y), x.data());

    let c = 0.7;
    let vx = t.constant(&Tensor::full(&[1, 1, 5, 5], c));
    let w = t.constant(&Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(vx, w, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert!(t.value(y).iter().all(|&v| (v - 9.0 * c).abs() < 1e-12));
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = Rng::new(2);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let mut t = Tape::new();
        let (vx, vw) = (t.constant(&x), t.constant(&w));
        let y = t.conv2d(vx, vw, None, stride, pad).unwrap();
        let (oracle, ho, wo) = naive_conv(x.data(), w.data(), 2, 5, 5, 3, 3, stride, pad);
        assert_eq!(t.shape(y), &[1, 3, ho, wo]);
        assert!(close(t.value(y), &oracle, 1e-12));
    }
}

#[test]
fn conv_output_extent_formula_and_oversized_kernel() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::zeros(&[1, 1, 7, 7]));
    let w = t.constant(&Tensor::zeros(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(
        t.shape(y),
        &[1, 1, (7 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]
    );
    let big = t.constant(&Tensor::zeros(&[1, 1, 9, 9]));
    assert!(matches!(t.conv2d(x, big, None, 1, 0), Err(Error::Shape(_))));
}

// ---------- max pool ----------

#[test]
fn max_pool_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(t.value(y), &[4.0]);
    let x = t.constant(&Tensor::full(&[1, 2, 4, 4], 3.5));
    let y = t.max_pool2d(x, 2, 2).unwrap();
    assert!(t.value(y).iter().all(|&v| v == 3.5));
    let odd = t.constant(&Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(t.max_pool2d(odd, 2, 2), Err(Error::Shape(_))));
}

#[test]
fn max_pool_matches_window_scan() {
    let mut rng = Rng::new(3);
    let x = rand_tensor(&[1, 1, 8, 8], &mut rng);
    let mut t = Tape::new();
    let v = t.constant(&x);
    let y = t.max_pool2d(v, 2, 2).unwrap();
    let mut oracle = vec![];
    for oy in 0..4 {
        for ox in 0..4 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.get(&[0, 0, 2 * oy + dy, 2 * ox + dx]));
                }
            }
            oracle.push(m);
        }
    }
    assert_eq!(t.value(y), oracle.as_slice());
}

#[test]
fn max_pool_tie_routes_gradient_to_first() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::full(&[1, 1, 2, 2], 1.0).with_requires_grad(true));
    let y = t.max_pool2d(x, 2, 2).unwrap();
    let l = t.sum_all(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

// ---------- batch norm ----------

#[test]
fn batch_norm_eval_identity() {
    let mut rng = Rng::new(4);
    let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
    let mut t = Tape::new();
    let vx = t.constant(&x);
    let g = t.constant(&Tensor::ones(&[3]));
    let b = t.constant(&Tensor::zeros(&[3]));
    let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
    let (y, stats) = t
        .batch_norm(
            vx,
            g,
            b,
            1,
            BnMode::Eval {
                mean: &mean,
                var: &var,
            },
            1e-5,
        )
        .unwrap();
    assert!(stats.is_none());
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(close(
        t.value(y),
        &x.data().iter().map(|v| v * s).collect::<Vec<_>>(),
        1e-15
    ));
}

#[test]
fn batch_norm_train_unit_batch() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::from_f64(&[2, 2], &[-1.0, -1.0, 1.0, 1.0]).unwrap());
    let g = t.constant(&Tensor::ones(&[2]));
    let b = t.constant(&Tensor::zeros(&[2]));
    let (y, stats) = t.batch_norm(x, g, b, 1, BnMode::Train, 1e-5).unwrap();
    assert!(close(t.value(y), &[-1.0, -1.0, 1.0, 1.0], 1e-4));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![0.0, 0.0]);
    assert_eq!(stats.var, vec![2.0, 2.0]);
}

#[test]
fn batch_norm_train_matches_formula() {
    let mut rng = Rng::new(6);
    let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
    let gamma = rand_tensor(&[2], &mut rng);
    let beta = rand_tensor(&[2], &mut rng);
    let mut t = Tape::new();
    let (vx, vg, vb) = (t.constant(&x), t.constant(&gamma), t.constant(&beta));
    let (y, _) = t.batch_norm(vx, vg, vb, 1, BnMode::Train, 1e-5).unwrap();
    for c in 0..2 {
        let mut vals = vec![];
        for b in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    vals.push(x.get(&[b, c, i, j]));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let yt = t.tensor(y);
        for b in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let want = (x.get(&[b, c, i, j]) - mean) / (var + 1e-5).sqrt()
                        * gamma.data()[c]
                        + beta.data()[c];
                    assert!((yt.get(&[b, c, i, j]) - want).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn batch_norm_single_value_per_channel_is_degenerate() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::zeros(&[1, 3]));
    let g = t.constant(&Tensor::ones(&[3]));
    let b = t.constant(&Tensor::zeros(&[3]));
    assert!(matches!(
        t.batch_norm(x, g, b, 1, BnMode::Train, 1e-5),
        Err(Error::Contract(_))
    ));
}

// ---------- backward ----------

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::zeros(&[2, 3]).with_requires_grad(true));
    let l = t.sum_all(x).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares_and_accumulation() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(
        &Tensor::from_f64(&[3], &[1.0, 2.0, 3.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let sq = t.mul(x, x).unwrap();
    let l = t.sum_all(sq).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::from_f64(&[1], &[f64::MAX]).unwrap());
    assert!(matches!(t.mul(x, x), Err(Error::Numeric(_))));
}

// ---------- remaining ops: exact examples ----------

#[test]
fn relu_gelu_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::from_f64(&[3], &[-2.0, 0.0, 3.0]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r), &[0.0, 0.0, 3.0]);
    let g = t.gelu(x).unwrap();
    let exact = |v: f64| 0.5 * v * (1.0 + erf(v / 2f64.sqrt()));
    assert_eq!(t.value(g)[1], 0.0);
    assert!((t.value(g)[0] - exact(-2.0)).abs() < 1e-3);
    assert!((t.value(g)[2] - exact(3.0)).abs() < 1e-3);
}

// Abramowitz-Stegun 7.1.26, |err| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let s = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t
            + 0.254_829_592)
            * t
            * (-x * x).exp();
    s * y
}

#[test]
fn shape_op_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap());
    let p = t.transpose(x, 0, 1).unwrap();
    assert_eq!(t.value(p), &[0., 3., 1., 4., 2., 5.]);
    let c = t.concat(&[x, x], 0).unwrap();
    assert_eq!(t.shape(c), &[4, 3]);
    let c1 = t.concat(&[x, x], 1).unwrap();
    assert_eq!(
        t.value(c1),
        &[0., 1., 2., 0., 1., 2., 3., 4., 5., 3., 4., 5.]
    );
    let s = t.slice(x, 1, 1, 2).unwrap();
    assert_eq!(t.value(s), &[1., 2., 4., 5.]);
    let i = t.index_select(x, 1, &[2, 0]).unwrap();
    assert_eq!(t.value(i), &[2., 0., 5., 3.]);
    let m = t.mean(x, 1).unwrap();
    assert_eq!(t.value(m), &[1.0, 4.0]);
    let m0 = t.mean(x, 0).unwrap();
    assert_eq!(t.value(m0), &[1.5, 2.5, 3.5]);
    let b = t.constant(&Tensor::from_f64(&[3], &[10., 20., 30.]).unwrap());
    let a = t.add(x, b).unwrap();
    assert_eq!(t.value(a), &[10., 21., 32., 13., 24., 35.]);
    let e = t.broadcast_to(b, &[2, 3]).unwrap();
    assert_eq!(t.value(e), &[10., 20., 30., 10., 20., 30.]);
    assert!(t.slice(x, 1, 2, 2).is_err());
    assert!(t.reshape(x, &[4]).is_err());
    assert!(t.permute(x, &[0, 0]).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&Tensor::zeros(&[2, 4]));
    let l = t.cross_entropy(x, &[0, 3]).unwrap();
    assert!((t.value(l)[0] - 4f64.ln()).abs() < 1e-15);
    let x = t.constant(&Tensor::from_f64(&[1, 2], &[50.0, 0.0]).unwrap());
    let l = t.cross_entropy(x, &[0]).unwrap();
    assert!(t.value(l)[0] < 1e-20);
    assert!(t.cross_entropy(x, &[2]).is_err());
}

// ---------- gradient checks: every differentiable op on 3 shapes ----------

type Build = fn(&mut Tape<f64>, &[duoformer::Var]) -> duoformer::Result<duoformer::Var>;

fn check_op(name: &str, shapes: &[Vec<Vec<usize>>], build: Build) {
    let mut rng = Rng::new(99);
    for set in shapes {
        let params: Vec<Tensor<f64>> = set.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        // Weighted sum keeps the loss sensitive to every output coordinate.
        let report = grad_check(
            |t, v| {
                let y = build(t, v)?;
                let shape = t.shape(y).to_vec();
                let n: usize = shape.iter().product();
                let w: Vec<f64> = (0..n)
                    .map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4)
                    .collect();
                let wv = t.constant(&Tensor::new(&shape, w).unwrap());
                let p = t.mul(y, wv)?;
                t.sum_all(p)
            },
            &params,
            1e-5,
            None,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{name} {set:?}: {report:?}");
    }
}

fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
    v.iter().map(|x| x.to_vec()).collect()
}

#[test]
fn gradcheck_binary_ops() {
    let shapes = vec![
        s(&[&[3], &[3]]),
        s(&[&[2, 3], &[3]]),
        s(&[&[2, 1, 4], &[3, 1]]),
    ];
    check_op("add", &shapes, |t, v| t.add(v[0], v[1]));
    check_op("sub", &shapes, |t, v| t.sub(v[0], v[1]));
    check_op("mul", &shapes, |t, v| t.mul(v[0], v[1]));
}

#[test]
fn gradcheck_matmul() {
    let shapes = vec![
        s(&[&[3, 4], &[4, 2]]),
        s(&[&[2, 3, 4], &[4, 5]]),
        s(&[&[2, 2, 3, 4], &[2, 1, 4, 3]]),
    ];
    check_op("matmul", &shapes, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn gradcheck_unary_ops() {
    let shapes = vec![s(&[&[5]]), s(&[&[2, 3]]), s(&[&[2, 2, 3]])];
    check_op("relu", &shapes, |t, v| t.relu(v[0]));
    check_op("gelu", &shapes, |t, v| t.gelu(v[0]));
    check_op("scale", &shapes, |t, v| t.scale(v[0], -1.7));
    check_op("softmax", &shapes, |t, v| {
        let last = t.shape(v[0]).len() - 1;
        t.softmax(v[0], last)
    });
    check_op("softmax0", &shapes, |t, v| t.softmax(v[0], 0));
    check_op("mean", &shapes, |t, v| t.mean(v[0], 0));
    check_op("mean_all", &shapes, |t, v| t.mean_all(v[0]));
    check_op("sum_all", &shapes, |t, v| t.sum_all(v[0]));
}

#[test]
fn gradcheck_shape_ops() {
    let shapes = vec![s(&[&[2, 3]]), s(&[&[3, 2, 2]]), s(&[&[2, 3, 4]])];
    check_op("reshape", &shapes, |t, v| {
        let n = t.value(v[0]).len();
        t.reshape(v[0], &[n])
    });
    check_op("permute", &shapes, |t, v| {
        let r = t.shape(v[0]).len();
        let perm: Vec<usize> = (0..r).rev().collect();
        t.permute(v[0], &perm)
    });
    check_op("concat", &shapes, |t, v| t.concat(&[v[0], v[0]], 1));
    check_op("slice", &shapes, |t, v| t.slice(v[0], 1, 1, 1));
    check_op("index_select", &shapes, |t, v| {
        t.index_select(v[0], 0, &[1, 0, 1])
    });
    check_op("broadcast_to", &shapes, |t, v| {
        let mut sh = vec![2];
        sh.extend_from_slice(t.shape(v[0]));
        t.broadcast_to(v[0], &sh)
    });
}

#[test]
fn gradcheck_layer_norm() {
    let shapes = vec![
        s(&[&[4], &[4], &[4]]),
        s(&[&[3, 5], &[5], &[5]]),
        s(&[&[2, 2, 6], &[6], &[6]]),
    ];
    check_op("layer_norm", &shapes, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-6)
    });
}

#[test]
fn gradcheck_batch_norm() {
    let shapes = vec![
        s(&[&[4, 3], &[3], &[3]]),
        s(&[&[2, 2, 3, 3], &[2], &[2]]),
        s(&[&[3, 4, 2, 2], &[4], &[4]]),
    ];
    check_op("batch_norm_train", &shapes, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1, BnMode::Train, 1e-5)?.0)
    });
    check_op("batch_norm_eval", &shapes, |t, v| {
        let ch = t.shape(v[1])[0];
        let mean: Vec<f64> = (0..ch).map(|c| 0.1 * c as f64).collect();
        let var: Vec<f64> = (0..ch).map(|c| 0.5 + c as f64).collect();
        Ok(t.batch_norm(
            v[0],
            v[1],
            v[2],
            1,
            BnMode::Eval {
                mean: &mean,
                var: &var,
            },
            1e-5,
        )?
        .0)
    });
}

#[test]
fn gradcheck_conv2d() {
    let shapes = vec![
        s(&[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]]),
        s(&[&[2, 1, 4, 4], &[2, 1, 3, 3], &[2]]),
        s(&[&[1, 3, 6, 6], &[2, 3, 1, 1], &[2]]),
    ];
    check_op("conv_s1p1", &shapes, |t, v| {
        let k = t.shape(v[1])[2];
        t.conv2d(v[0], v[1], Some(v[2]), 1, k / 2)
    });
    check_op("conv_s2p1", &shapes, |t, v| {
        let k = t.shape(v[1])[2];
        t.conv2d(v[0], v[1], Some(v[2]), 2, k / 2)
    });
}

#[test]
fn gradcheck_max_pool() {
    let shapes = vec![
        s(&[&[1, 1, 4, 4]]),
        s(&[&[2, 3, 4, 4]]),
        s(&[&[1, 2, 8, 8]]),
    ];
    check_op("max_pool2", &shapes, |t, v| t.max_pool2d(v[0], 2, 2));
    check_op("max_pool4", &shapes, |t, v| t.max_pool2d(v[0], 4, 4));
}

#[test]
fn gradcheck_cross_entropy() {
    let mut rng = Rng::new(8);
    for (b, c) in [(1, 3), (4, 5), (3, 2)] {
        let logits = rand_tensor(&[b, c], &mut rng);
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let r = grad_check(
            |t, v| t.cross_entropy(v[0], &labels),
            &[logits],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

// ---------- invariants ----------

proptest! {
    #[test]
    fn reshape_round_trip_is_identity(dims in proptest::collection::vec(1usize..4, 1..4), seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&dims, &mut rng);
        let n = x.numel();
        let mut t = Tape::new();
        let v = t.constant(&x);
        let flat = t.reshape(v, &[n]).unwrap();
        let back = t.reshape(flat, &dims).unwrap();
        prop_assert_eq!(t.value(back), x.data());
    }

    #[test]
    fn permute_inverse_is_identity(dims in proptest::collection::vec(1usize..4, 2..5), seed in 0u64..100) {
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&dims, &mut rng);
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        rng.shuffle(&mut perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut t = Tape::new();
        let v = t.constant(&x);
        let p = t.permute(v, &perm).unwrap();
        let back = t.permute(p, &inv).unwrap();
        prop_assert_eq!(t.shape(back), x.shape());
        prop_assert_eq!(t.value(back), x.data());
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let mut t = Tape::new();
        let v = t.constant(&Tensor::new(&[rows, cols], data).unwrap());
        let y = t.softmax(v, 1).unwrap();
        for row in t.value(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
