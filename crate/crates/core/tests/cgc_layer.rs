use cgc_core::cgc::{
    cgc_forward, interact_channels, modulate_kernel, CgcConfig, CgcLayer, CgcRunning, Combine, GateEnv, GateOptions, SeqCgcLayer, SeqConfig,
};
use cgc_core::ops::{Mode, PoolKind};
use cgc_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn randomize(layer: &mut CgcLayer<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in layer.params.named_mut() {
        *t = if name.ends_with(".gamma") {
            Tensor::from_fn(t.shape(), |_| rng.gen_range(0.5..1.5))
        } else {
            Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.5..0.5))
        };
    }
}

fn logit(g: f64) -> f64 {
    (g / (1.0 - g)).ln()
}

#[test]
fn zero_init_output_is_half_plain_conv_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let one_d = case % 5 == 4;
        let c = rng.gen_range(1..6);
        let o = rng.gen_range(1..6);
        let k = [2, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..=k / 2);
        let b = rng.gen_range(1..4);
        let (kernel, shape) = if one_d {
            (vec![k], vec![b, c, rng.gen_range(k..k + 6)])
        } else {
            (vec![k, k], vec![b, c, rng.gen_range(k..k + 5), rng.gen_range(k..k + 5)])
        };
        let axes = kernel.len();
        let cfg = CgcConfig::new(c, o, &kernel, &vec![stride; axes], &vec![pad; axes], &GateOptions::default()).unwrap();
        let mut layer = CgcLayer::<f64>::new(cfg, &mut rng);
        let x = rand_tensor(&shape, &mut rng);
        let plain = layer.plain_forward(&x).unwrap().scale(0.5);
        let out = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(out, plain, "case {case}");
        assert!(layer.trace(&x, Mode::Train).unwrap().gate.data().iter().all(|&g| g == 0.5));
    }
}

#[test]
fn zero_init_sequence_kernel_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layer = SeqCgcLayer::<f64>::new(SeqConfig::new(16, 8, 7).unwrap(), &mut rng);
    let s = rand_tensor(&[3, 16, 7], &mut rng);
    let (out, gate) = layer.forward(&s).unwrap();
    assert_eq!(gate.shape(), &[3, 8, 7]);
    assert!(gate.data().iter().all(|&g| g == 0.5));
    assert_eq!(out, layer.plain_forward(&s).unwrap().scale(0.5));
}

#[test]
fn one_by_one_kernel_is_rejected() {
    let e = CgcConfig::conv2d(8, 8, 1).unwrap_err().to_string();
    assert!(e.contains("plain convolution"), "{e}");
}

#[test]
fn interaction_shapes_follow_group_rule() {
    assert_eq!(CgcConfig::conv2d(3, 64, 3).unwrap().interact_shape(), [3, 64]);
    assert_eq!(CgcConfig::conv2d(16, 32, 3).unwrap().interact_shape(), [16, 32]);
    assert_eq!(CgcConfig::conv2d(64, 64, 3).unwrap().interact_shape(), [16, 16]);
    assert_eq!(CgcConfig::conv2d(64, 64, 3).unwrap().latent, 4);
}

#[test]
fn interaction_matches_block_diagonal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = CgcConfig::conv2d(32, 64, 3).unwrap();
    assert_eq!(cfg.groups, 2);
    let mut layer = CgcLayer::<f64>::new(cfg.clone(), &mut rng);
    layer.params.norm_o = Some([Tensor::ones(&[64]), Tensor::zeros(&[64])]);
    let (b, d) = (2, cfg.latent);
    let ctx = rand_tensor(&[b, 32, d], &mut rng);
    let mut tape = Tape::new();
    let vars = layer.params.bind(&mut tape).unwrap();
    let cv = tape.leaf(ctx.clone()).unwrap();
    let mut running = CgcRunning::identity(&cfg);
    let mut env = GateEnv { cfg: &cfg, vars: &vars, running: &mut running, mode: Mode::Eval, eps: 1e-5 };
    let out = interact_channels(&mut tape, &mut env, cv).unwrap();
    let y = tape.value(out);
    assert_eq!(y.shape(), &[b, 64, d]);
    let i = layer.params.interact.as_ref().unwrap();
    let dense = |h: usize, c: usize| if h / 32 == c / 16 { i.get(&[c % 16, h % 32]) } else { 0.0 };
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for n in 0..b {
        for h in 0..64 {
            for p in 0..d {
                let v: f64 = (0..32).map(|c| dense(h, c) * ctx.get(&[n, c, p])).sum();
                assert!((y.get(&[n, h, p]) - (v * scale).max(0.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn modulation_is_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let g = Tensor::from_fn(&[2, 3, 2, 3, 3], |_| rng.gen_range(0.0..1.0));
    let mut tape = Tape::new();
    let (wv, gv) = (tape.leaf(w.clone()).unwrap(), tape.leaf(g.clone()).unwrap());
    let m = modulate_kernel(&mut tape, wv, gv).unwrap();
    let y = tape.value(m);
    for (idx, v) in y.data().iter().enumerate() {
        assert_eq!(*v, g.data()[idx] * w.data()[idx % w.len()]);
    }
    let ones = tape.leaf(Tensor::ones(&[1, 3, 2, 3, 3])).unwrap();
    let m = modulate_kernel(&mut tape, wv, ones).unwrap();
    assert_eq!(tape.value(m).data(), w.data());
    let bad = tape.leaf(Tensor::ones(&[1, 3, 2, 3, 2])).unwrap();
    assert!(modulate_kernel(&mut tape, wv, bad).is_err());
}

#[test]
fn product_gate_starts_at_a_quarter() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let opts = GateOptions { combine: Combine::Product, ..Default::default() };
    let cfg = CgcConfig::new(4, 4, &[3, 3], &[1, 1], &[1, 1], &opts).unwrap();
    let mut layer = CgcLayer::<f64>::new(cfg, &mut rng);
    let gate = layer.trace(&rand_tensor(&[2, 4, 5, 5], &mut rng), Mode::Train).unwrap().gate;
    assert!(gate.data().iter().all(|&g| g == 0.25));
}

#[test]
fn eval_gates_are_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut layer = CgcLayer::<f64>::new(CgcConfig::conv2d(4, 6, 3).unwrap(), &mut rng);
    randomize(&mut layer, &mut rng);
    layer.forward(&rand_tensor(&[4, 4, 6, 6], &mut rng), Mode::Train).unwrap();
    let a = rand_tensor(&[2, 4, 6, 6], &mut rng);
    let mut b = a.clone();
    b.data_mut()[144..].iter_mut().for_each(|v| *v = -*v * 0.5);
    let ya = layer.forward(&a, Mode::Eval).unwrap();
    let yb = layer.forward(&b, Mode::Eval).unwrap();
    let per = ya.len() / 2;
    assert_eq!(&ya.data()[..per], &yb.data()[..per]);
    assert_ne!(&ya.data()[per..], &yb.data()[per..]);
    let twin = Tensor::stack(&[a.select0(0).unwrap(), a.select0(0).unwrap()]).unwrap();
    let yt = layer.forward(&twin, Mode::Eval).unwrap();
    assert_eq!(&yt.data()[..per], &yt.data()[per..]);
}

#[test]
fn shared_encoder_commutes_with_channel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = CgcConfig::new(4, 4, &[3, 3], &[1, 1], &[1, 1], &GateOptions::variant("only-g1").unwrap()).unwrap();
    let mut layer = CgcLayer::<f64>::new(cfg, &mut rng);
    randomize(&mut layer, &mut rng);
    layer.params.norm_c1 = Some([Tensor::ones(&[4]), Tensor::zeros(&[4])]);
    let x = rand_tensor(&[3, 4, 5, 5], &mut rng);
    let perm = [2, 0, 3, 1];
    let xp = Tensor::from_fn(x.shape(), |i| {
        let (n, r) = (i / 100, i % 100);
        let (ch, s) = (r / 25, r % 25);
        x.data()[n * 100 + perm[ch] * 25 + s]
    });
    let c = layer.trace(&x, Mode::Train).unwrap().context_decode.unwrap();
    let cp = layer.trace(&xp, Mode::Train).unwrap().context_decode.unwrap();
    let d = layer.config.latent;
    for n in 0..3 {
        for ch in 0..4 {
            for p in 0..d {
                assert!((cp.get(&[n, ch, p]) - c.get(&[n, perm[ch], p])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gate_paths_receive_gradient_by_the_second_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let cfg = CgcConfig::conv2d(16, 16, 3).unwrap();
    let mut layer = CgcLayer::<f64>::new(cfg.clone(), &mut rng);
    let x = rand_tensor(&[4, 16, 6, 6], &mut rng);
    let r = rand_tensor(&[4, 16, 6, 6], &mut rng);
    let watched = ["encoder", "interact", "decoder_c", "decoder_o"];
    for step in 0..2 {
        let mut tape = Tape::new();
        let vars = layer.params.bind(&mut tape).unwrap();
        let xv = tape.leaf(x.clone()).unwrap();
        let mut env = GateEnv { cfg: &cfg, vars: &vars, running: &mut layer.running, mode: Mode::Train, eps: 1e-5 };
        let out = cgc_forward(&mut tape, &mut env, xv).unwrap().out;
        let grads = tape.backward_with(out, r.clone()).unwrap();
        let names: Vec<(&str, cgc_core::Var)> = vars.named().into_iter().map(|(n, v)| (n, *v)).collect();
        for (name, t) in layer.params.named_mut() {
            let v = names.iter().find(|(n, _)| *n == name).unwrap().1;
            let g = grads.get_or_zeros(v, &tape);
            if watched.contains(&name) {
                assert_eq!(g.max_abs() > 0.0, step == 1, "{name} at step {step}");
            }
            *t = t.zip_map(&g, |p, q| p - 0.1 * q).unwrap();
        }
    }
}

fn arb_options() -> impl Strategy<Value = GateOptions> {
    (0usize..GateOptions::VARIANTS.len()).prop_map(|i| GateOptions::variant(GateOptions::VARIANTS[i]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_range_and_shape(opts in arb_options(), seed in 0u64..10_000, c in 1usize..5, o in 1usize..5, k in 2usize..4, one_d in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = if one_d { vec![k] } else { vec![k, k] };
        let n = kernel.len();
        let cfg = CgcConfig::new(c, o, &kernel, &vec![1; n], &vec![k / 2; n], &opts).unwrap();
        let mut layer = CgcLayer::<f64>::new(cfg.clone(), &mut rng);
        randomize(&mut layer, &mut rng);
        let mut shape = vec![2, c];
        shape.extend(std::iter::repeat_n(5, n));
        let gate = layer.trace(&rand_tensor(&shape, &mut rng), Mode::Train).unwrap().gate;
        let mut want = vec![2];
        want.extend(cfg.weight_shape());
        prop_assert_eq!(gate.shape(), want.as_slice());
        prop_assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn sum_sigmoid_logits_are_additive(seed in 0u64..10_000, c in 2usize..5, o in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = CgcLayer::<f64>::new(CgcConfig::conv2d(c, o, 3).unwrap(), &mut rng);
        randomize(&mut layer, &mut rng);
        let gate = layer.trace(&rand_tensor(&[2, c, 5, 5], &mut rng), Mode::Train).unwrap().gate;
        for n in 0..2 {
            for kk in 0..9 {
                let p = |h: usize, i: usize| logit(gate.get(&[n, h, i, kk / 3, kk % 3]));
                for h in 1..o {
                    let base = p(h, 0) - p(0, 0);
                    for i in 1..c {
                        prop_assert!((p(h, i) - p(0, i) - base).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn only_g1_gate_ignores_output_channel(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CgcConfig::new(3, 4, &[3, 3], &[1, 1], &[1, 1], &GateOptions::variant("only-g1").unwrap()).unwrap();
        let mut layer = CgcLayer::<f64>::new(cfg, &mut rng);
        randomize(&mut layer, &mut rng);
        let gate = layer.trace(&rand_tensor(&[2, 3, 5, 5], &mut rng), Mode::Train).unwrap().gate;
        let per_o = 3 * 9;
        for n in 0..2 {
            let base = &gate.data()[n * 4 * per_o..n * 4 * per_o + per_o];
            for h in 1..4 {
                let start = (n * 4 + h) * per_o;
                prop_assert_eq!(&gate.data()[start..start + per_o], base);
            }
        }
    }

    #[test]
    fn gate_depends_only_on_pooled_summary(seed in 0u64..10_000, v in 0usize..GateOptions::VARIANTS.len()) {
        let opts = GateOptions::variant(GateOptions::VARIANTS[v]).unwrap();
        prop_assume!(opts.pool == PoolKind::Avg && opts.pooled_scale == 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CgcConfig::new(3, 4, &[3, 3], &[1, 1], &[1, 1], &opts).unwrap();
        let mut layer = CgcLayer::<f64>::new(cfg, &mut rng);
        randomize(&mut layer, &mut rng);
        // Dyadic values keep every pooled sum exact; each 2x2 bin of the 6x6
        // input gets a zero-sum checkerboard perturbation.
        let x = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.gen_range(-64i32..64) as f64 / 64.0);
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let (r, q) = ((i / 6) % 6, i % 6);
            let a = ((i / 36) % 5) as f64 / 8.0 + 0.125;
            *v += if (r + q) % 2 == 0 { a } else { -a };
        }
        let mut twin = layer.clone();
        let ga = layer.trace(&x, Mode::Train).unwrap();
        let gb = twin.trace(&y, Mode::Train).unwrap();
        prop_assert_eq!(ga.gate, gb.gate);
        prop_assert_ne!(ga.out, gb.out);
    }
}
