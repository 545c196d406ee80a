use std::collections::BTreeSet;
use std::path::PathBuf;

use cgc_core::arch::{count_macs, count_params, naive_gate_cost, stage_filter, ArchDescriptor, GateMacs, MacConvention, Network};
use cgc_core::cgc::{CgcConfig, CgcParams, GateOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch(name: &str) -> Network {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../archs").join(name);
    ArchDescriptor::load(&p).unwrap().build().unwrap()
}

fn stages(s: &[&str]) -> BTreeSet<String> {
    s.iter().map(|v| v.to_string()).collect()
}

/// 3x3 convolutions of ResNet-110 as `(stage, c, o)`, in order.
fn r110_convs() -> Vec<(&'static str, u64, u64)> {
    let mut v = vec![("stem", 3, 16)];
    for (stage, w) in [("res1", 16u64), ("res2", 32), ("res3", 64)] {
        for i in 0..36 {
            let c = if i == 0 && w > 16 { w / 2 } else { w };
            v.push((stage, c, w));
        }
    }
    v
}

/// Gate parameters of a 3x3 layer written out by hand for each variant.
fn gate_oracle(c: u64, o: u64, variant: &str) -> u64 {
    let g = if c.is_multiple_of(16) && o.is_multiple_of(16) { c / 16 } else { 1 };
    let g = if variant == "g1-full" { 1 } else { g };
    let d = if variant == "d-full" { 9 } else { 4 };
    let e = 9 * d;
    let i = (c / g) * (o / g);
    let dec = d * 9;
    match variant {
        "only-g1" => e + dec + 2 * c,
        "only-g2" => e + i + dec + 2 * c + 2 * o,
        "two-e" => 2 * e + i + 2 * dec + 4 * c + 2 * o,
        "shared-d" => e + i + dec + 4 * c + 2 * o,
        "shared-norm" => e + i + 2 * dec + 2 * c + 2 * o,
        _ => e + i + 2 * dec + 4 * c + 2 * o,
    }
}

fn r110_oracle(variant: Option<&str>, gated: &[&str]) -> u64 {
    let mut total = 64 * 10 + 10;
    for (stage, c, o) in r110_convs() {
        total += 9 * c * o + 2 * o;
        if let Some(v) = variant {
            if gated.is_empty() || gated.contains(&stage) {
                total += gate_oracle(c, o, v);
            }
        }
    }
    total
}

#[test]
fn resnet110_matches_hand_enumeration() {
    let net = arch("resnet110.json");
    assert_eq!(count_params(&net).total_params(), r110_oracle(None, &[]));
    for v in ["default", "only-g1", "only-g2", "g1-full", "d-full", "two-e", "shared-d", "shared-norm", "product", "maxpool"] {
        let gated = net.with_cgc(&GateOptions::variant(v).unwrap(), None).unwrap();
        assert_eq!(count_params(&gated).total_params(), r110_oracle(Some(v), &[]), "{v}");
    }
    for s in [&["res3"][..], &["res2", "res3"]] {
        let gated = stage_filter(&net, &GateOptions::default(), &stages(s)).unwrap();
        assert_eq!(count_params(&gated).total_params(), r110_oracle(Some("default"), s), "{s:?}");
    }
}

#[test]
fn resnet50_structure() {
    let net = arch("resnet50.json");
    let r = count_params(&net);
    assert_eq!(r.total_params(), 25_557_032);
    let first = r.layers.iter().find(|l| l.id == "conv1").unwrap();
    assert_eq!(first.params, 9408);
    let gated = count_params(&net.with_cgc(&GateOptions::default(), None).unwrap());
    assert!(gated.gate_params() > 0 && gated.gate_params() * 100 < r.base_params());
    // Per layer the gate stays under 1% of the kernel from 128 channels up;
    // at 64 channels the six norm affines alone are about 1%.
    let net_gated = net.with_cgc(&GateOptions::default(), None).unwrap();
    for l in net_gated.flat_layers() {
        if let cgc_core::arch::LayerOp::Conv(c) = &l.op {
            if let Some(g) = &c.gate {
                if g.in_channels >= 128 {
                    assert!(g.gate_params().total() * 100 < g.in_channels * g.out_channels * 9, "{}", l.id);
                }
            }
        }
    }
}

#[test]
fn empty_stage_filter_is_baseline_and_unknown_stage_fails() {
    let net = arch("resnet110.json");
    let none = stage_filter(&net, &GateOptions::default(), &BTreeSet::new()).unwrap();
    assert_eq!(count_params(&none).total_params(), count_params(&net).total_params());
    let e = net.with_cgc(&GateOptions::default(), Some(&stages(&["res9"]))).unwrap_err().to_string();
    assert!(e.contains("res9") && e.contains("res1"), "{e}");
}

#[test]
fn stage_monotonicity() {
    let net = arch("resnet110.json");
    let sets: [&[&str]; 4] = [&[], &["res3"], &["res2", "res3"], &["res1", "res2", "res3"]];
    let mut prev = (0, 0);
    for s in sets {
        let r = count_macs(&stage_filter(&net, &GateOptions::default(), &stages(s)).unwrap(), MacConvention::ALL);
        let cur = (r.total_params(), r.total_macs() + r.gate_macs());
        assert!(cur.0 >= prev.0 && cur.1 >= prev.1, "{s:?}");
        prev = cur;
    }
}

#[test]
fn report_totals_are_sums_and_csv_has_every_layer() {
    let net = arch("resnet110.json").with_cgc(&GateOptions::default(), None).unwrap();
    let r = count_macs(&net, MacConvention::ALL);
    assert_eq!(r.total_params(), r.base_params() + r.gate_params());
    let b = r.gate_breakdown();
    assert_eq!(b.pool + b.encode + b.interact + b.decode + b.gate_multiply, r.gate_macs());
    assert_eq!(r.to_csv().lines().count(), r.layers.len() + 1);
    assert!(r.to_table().contains("1.79M"));
}

#[test]
fn gate_generation_cost_ignores_resolution() {
    let cfg = CgcConfig::conv2d(64, 64, 3).unwrap();
    let (a, b) = (GateMacs::of(&cfg, 56, 56), GateMacs::of(&cfg, 112, 112));
    assert_eq!((a.encode, a.interact, a.decode, a.gate_multiply), (b.encode, b.interact, b.decode, b.gate_multiply));
    assert!(b.pool > a.pool);
}

#[test]
fn naive_gate_examples() {
    assert_eq!(naive_gate_cost(256, 256, 256, 9, false), 150_994_944);
    assert_eq!(naive_gate_cost(256, 256, 256, 9, true), 1_179_648);
    assert_eq!(naive_gate_cost(1, 32, 16, 9, false), 32 * 16 * 9);
}

#[test]
fn broken_chain_names_the_layer() {
    let json = r#"{"name": "bad", "input": [3, 8, 8], "layers": [
        {"kind": "conv", "id": "a", "out": 4, "kernel": 3},
        {"kind": "global_pool", "id": "gap"},
        {"kind": "linear", "id": "fc", "out": 2},
        {"kind": "conv", "id": "b", "out": 4, "kernel": 3}]}"#;
    let e = ArchDescriptor::from_json(json).unwrap().build().unwrap_err().to_string();
    assert!(e.contains("`b`"), "{e}");
}

proptest! {
    #[test]
    fn gate_counts_match_instantiated_tensors(
        v in 0usize..GateOptions::VARIANTS.len(), c in 1usize..40, o in 1usize..40, k1 in 1usize..5, k2 in 2usize..5,
    ) {
        let opts = GateOptions::variant(GateOptions::VARIANTS[v]).unwrap();
        let cfg = CgcConfig::new(c, o, &[k1, k2], &[1, 1], &[0, 0], &opts).unwrap();
        let p = CgcParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let lengths: usize = p.named().iter().map(|(_, t)| t.len()).sum();
        prop_assert_eq!(lengths, cfg.gate_params().total() + o * c * k1 * k2);
    }
}
