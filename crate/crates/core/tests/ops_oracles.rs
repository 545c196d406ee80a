use cgc_core::gradcheck::{gradcheck, BinaryOp, ConvOp, LinearOp, NormOp, PoolOp, UnaryOp};
use cgc_core::ops::{
    adaptive_pool, affine_norm, binary, conv_nd, grouped_linear, softmax_cross_entropy, unary, Binary, ConvSpec, Mode, NormAxes, PoolKind,
    RunningStats, Unary,
};
use cgc_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation with zero padding and groups.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (b, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let og = o / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; b * o * ho * wo];
    for n in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..cg {
                        for p in 0..kh {
                            for q in 0..kw {
                                let yy = (i * stride + p) as isize - pad as isize;
                                let xx = (j * stride + q) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[n, g * cg + ic, yy as usize, xx as usize]) * w.get(&[oc, ic, p, q]);
                            }
                        }
                    }
                    y[((n * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, o, ho, wo], y).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let y = conv_nd(&x, &w, &ConvSpec::new(&[1, 1], &[1, 1], 1)).unwrap();
    assert!(max_diff(&y, &conv_oracle(&x, &w, 1, 1, 1)) < 1e-12);
}

#[test]
fn conv_scalar_kernel_and_shapes() {
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
    let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let y = conv_nd(&x, &w, &ConvSpec::unit(2)).unwrap();
    assert_eq!(y, x.scale(2.0));
    let y = conv_nd(&Tensor::<f64>::zeros(&[1, 3, 5, 5]), &Tensor::zeros(&[4, 3, 3, 3]), &ConvSpec::new(&[1, 1], &[1, 1], 1)).unwrap();
    assert_eq!(y.shape(), &[1, 4, 5, 5]);
}

#[test]
fn conv_shape_error_names_axis() {
    let e = conv_nd(&Tensor::<f64>::zeros(&[1, 3, 5, 5]), &Tensor::zeros(&[4, 2, 3, 3]), &ConvSpec::unit(2)).unwrap_err();
    assert!(e.to_string().contains("channel"), "{e}");
}

#[test]
fn conv_1d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 4, 9], &mut rng);
    let w = rand_tensor(&[4, 2, 3], &mut rng);
    let y = conv_nd(&x, &w, &ConvSpec::new(&[2], &[1], 2)).unwrap();
    assert_eq!(y.shape(), &[2, 4, 5]);
    for n in 0..2 {
        for oc in 0..4 {
            let g = oc / 2;
            for j in 0..5 {
                let mut acc = 0.0;
                for ic in 0..2 {
                    for q in 0..3 {
                        let t = (2 * j + q) as isize - 1;
                        if (0..9).contains(&t) {
                            acc += x.get(&[n, g * 2 + ic, t as usize]) * w.get(&[oc, ic, q]);
                        }
                    }
                }
                assert!((y.get(&[n, oc, j]) - acc).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_random_geometry_matches_oracle(
        seed in 0u64..1000, b in 1usize..3, g in 1usize..3, cg in 1usize..3, og in 1usize..3,
        h in 3usize..7, w in 3usize..7, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[b, g * cg, h, w], &mut rng);
        let wt = rand_tensor(&[g * og, cg, k, k], &mut rng);
        let y = conv_nd(&x, &wt, &ConvSpec::new(&[stride, stride], &[pad, pad], g)).unwrap();
        prop_assert!(max_diff(&y, &conv_oracle(&x, &wt, stride, pad, g)) < 1e-12);
    }

    #[test]
    fn avg_pool_keeps_global_mean_when_bins_tile(seed in 0u64..1000, oh in 1usize..4, ow in 1usize..4, m in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[1, 2, oh * m, ow * m], &mut rng);
        let y = adaptive_pool(&x, &[oh, ow], PoolKind::Avg).unwrap();
        prop_assert!((x.sum() / x.len() as f64 - y.sum() / y.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn vjp_is_linear_in_upstream(seed in 0u64..1000, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let w = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let spec = ConvSpec::new(&[1, 1], &[1, 1], 1);
        let u = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let v = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let uv = u.zip_map(&v.scale(a), |p, q| p + q).unwrap();
        let (gx_u, gw_u) = cgc_core::ops::conv_nd_vjp(&x, &w, &spec, &u).unwrap();
        let (gx_v, gw_v) = cgc_core::ops::conv_nd_vjp(&x, &w, &spec, &v).unwrap();
        let (gx, gw) = cgc_core::ops::conv_nd_vjp(&x, &w, &spec, &uv).unwrap();
        prop_assert_eq!(gx.shape(), x.shape());
        prop_assert_eq!(gw.shape(), w.shape());
        prop_assert!(max_diff(&gx, &gx_u.zip_map(&gx_v.scale(a), |p, q| p + q).unwrap()) < 1e-12);
        prop_assert!(max_diff(&gw, &gw_u.zip_map(&gw_v.scale(a), |p, q| p + q).unwrap()) < 1e-12);
    }
}

#[test]
fn grouped_conv_is_concatenation_of_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 4, 5, 5], &mut rng);
    let w = rand_tensor(&[6, 2, 3, 3], &mut rng);
    let spec = ConvSpec::new(&[1, 1], &[1, 1], 2);
    let y = conv_nd(&x, &w, &spec).unwrap();
    for g in 0..2 {
        let xs = Tensor::from_fn(&[2, 2, 5, 5], |i| {
            let (n, r) = (i / 50, i % 50);
            x.data()[n * 100 + g * 50 + r]
        });
        let ws = Tensor::new(&[3, 2, 3, 3], w.data()[g * 54..(g + 1) * 54].to_vec()).unwrap();
        let ys = conv_nd(&xs, &ws, &ConvSpec::new(&[1, 1], &[1, 1], 1)).unwrap();
        for n in 0..2 {
            assert_eq!(&y.data()[n * 150 + g * 75..n * 150 + (g + 1) * 75], &ys.data()[n * 75..(n + 1) * 75]);
        }
    }
}

#[test]
fn adaptive_pool_examples() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64);
    let y = adaptive_pool(&x, &[2, 2], PoolKind::Avg).unwrap();
    assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    let c = Tensor::full(&[1, 2, 5, 7], 0.75);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        assert!(adaptive_pool(&c, &[3, 2], kind).unwrap().data().iter().all(|&v| v == 0.75));
        assert_eq!(adaptive_pool(&x, &[4, 4], kind).unwrap(), x);
    }
    assert!(adaptive_pool(&x, &[0, 2], PoolKind::Avg).is_err());
}

#[test]
fn grouped_linear_matches_dense_and_block_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[3, 2, 5], &mut rng);
    let w = rand_tensor(&[5, 4], &mut rng);
    let y = grouped_linear(&x, &w, 1).unwrap();
    for r in 0..6 {
        for q in 0..4 {
            let want: f64 = (0..5).map(|p| x.data()[r * 5 + p] * w.data()[p * 4 + q]).sum();
            assert!((y.data()[r * 4 + q] - want).abs() < 1e-12);
        }
    }
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x4 = rand_tensor(&[3, 4], &mut rng);
    assert_eq!(grouped_linear(&x4, &eye, 2).unwrap(), x4);
    assert!(grouped_linear(&x4, &rand_tensor(&[3, 2], &mut rng), 2).is_err());
}

#[test]
fn batch_norm_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[4, 3, 5], &mut rng);
    let gamma = rand_tensor(&[3], &mut rng);
    let beta = rand_tensor(&[3], &mut rng);
    let mut rs = RunningStats::identity(3);
    let (y, _) = affine_norm(&x, NormAxes::Channel(1), &gamma, &beta, Mode::Train, Some(&mut rs), 1e-5).unwrap();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..5).map(move |j| (n, j))).map(|(n, j)| x.get(&[n, ch, j])).collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        for n in 0..4 {
            for j in 0..5 {
                let want = (x.get(&[n, ch, j]) - mean) / (var + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
                assert!((y.get(&[n, ch, j]) - want).abs() < 1e-10);
            }
        }
        assert!((rs.mean[ch] - 0.1 * mean).abs() < 1e-12);
        assert!((rs.var[ch] - (0.9 + 0.1 * var * 20.0 / 19.0)).abs() < 1e-12);
    }
}

#[test]
fn norm_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let z = Tensor::zeros(&[3]);
    let (y, _) = affine_norm(&x, NormAxes::Channel(1), &z, &z, Mode::Train, None, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let c = Tensor::full(&[2, 3, 4], 1.5);
    let (y, _) = affine_norm(&c, NormAxes::Channel(1), &Tensor::ones(&[3]), &z, Mode::Train, None, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let (y, _) = affine_norm(&x, NormAxes::Trailing, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), Mode::Train, None, 1e-5).unwrap();
    for row in y.data().chunks(4) {
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
    }
    assert!(affine_norm(&x, NormAxes::Channel(1), &z, &z, Mode::Eval, None, 1e-5).is_err());
}

#[test]
fn elementwise_definitions() {
    let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(unary(&x, Unary::Relu).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(cgc_core::ops::sigmoid(0.0f64), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let v: f64 = rng.gen_range(-30.0..30.0);
        let s = cgc_core::ops::sigmoid(v) + cgc_core::ops::sigmoid(-v);
        assert!((s - 1.0).abs() < 1e-15);
    }
    let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
    let b = Tensor::from_fn(&[1, 4, 1], |i| i as f64);
    let y = binary(&a, &b, Binary::Mul).unwrap();
    assert_eq!(y.shape(), &[2, 4, 3]);
    assert_eq!(y.get(&[1, 2, 1]), 4.0 * 2.0);
    assert!(binary(&a, &Tensor::zeros(&[3, 2]), Binary::Add).is_err());
}

#[test]
fn cross_entropy_uniform_logits_is_log_k() {
    let (loss, _) = softmax_cross_entropy(&Tensor::<f64>::zeros(&[3, 5]), &[0, 4, 2]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn op_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 4, 5, 5], &mut rng);
    let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
    let e = gradcheck(&ConvOp(ConvSpec::new(&[2, 1], &[1, 0], 2)), &[x.clone(), w], 1e-6).unwrap();
    assert!(e < 1e-6, "conv {e}");
    let e = gradcheck(&LinearOp { groups: 2 }, &[rand_tensor(&[3, 4], &mut rng), rand_tensor(&[2, 3], &mut rng)], 1e-6).unwrap();
    assert!(e < 1e-9, "linear {e}");
    let e = gradcheck(&PoolOp { out: vec![2, 3], kind: PoolKind::Avg }, std::slice::from_ref(&x), 1e-6).unwrap();
    assert!(e < 1e-6, "avg pool {e}");
    let e = gradcheck(&PoolOp { out: vec![2, 2], kind: PoolKind::Max }, std::slice::from_ref(&x), 1e-6).unwrap();
    assert!(e < 1e-5, "max pool {e}");
    let e = gradcheck(&UnaryOp(Unary::Sigmoid), std::slice::from_ref(&x), 1e-6).unwrap();
    assert!(e < 1e-6, "sigmoid {e}");
    let e = gradcheck(&BinaryOp(Binary::Mul), &[x.clone(), rand_tensor(&[1, 4, 1, 5], &mut rng)], 1e-6).unwrap();
    assert!(e < 1e-6, "mul {e}");
    let gamma = rand_tensor(&[4], &mut rng);
    let beta = rand_tensor(&[4], &mut rng);
    let op = NormOp::<f64> { axes: NormAxes::Channel(1), mode: Mode::Train, running: None, eps: 1e-5 };
    let e = gradcheck(&op, &[x, gamma, beta], 1e-6).unwrap();
    assert!(e < 1e-5, "norm {e}");
}
