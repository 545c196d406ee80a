//! Analytic parameter and multiply-accumulate counts.

use std::fmt::Write as _;

use super::descriptor::{Layer, LayerOp, Network, Shortcut};
use crate::cgc::CgcConfig;
use crate::ops::PoolKind;

/// Counting rules for the gate path that the literature leaves ambiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacConvention {
    /// Charge the channel interaction `d * c * o / g` (once per latent
    /// position) rather than `c * o / g`.
    pub interact_latent_factor: bool,
    /// Charge the `o * c * k1 * k2` element-wise gate product.
    pub gate_multiply: bool,
    /// Charge context pooling (one add per input element, one divide per
    /// output element).
    pub pooling: bool,
}

impl MacConvention {
    /// Convention selected by the calibration against the published
    /// ResNet-110 overhead; see `calibrate_convention`.
    pub const CALIBRATED: Self = Self { interact_latent_factor: true, gate_multiply: false, pooling: true };

    pub const ALL: Self = Self { interact_latent_factor: true, gate_multiply: true, pooling: true };
}

impl Default for MacConvention {
    fn default() -> Self {
        Self::CALIBRATED
    }
}

/// Per-sample gate-path MACs of one gated convolution, all terms computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateMacs {
    pub pool: u64,
    pub encode: u64,
    /// `d * c * o / g`.
    pub interact: u64,
    pub decode: u64,
    pub gate_multiply: u64,
}

impl GateMacs {
    pub fn of(cfg: &CgcConfig, in_h: usize, in_w: usize) -> Self {
        let (c, o, d) = (cfg.in_channels as u64, cfg.out_channels as u64, cfg.latent as u64);
        let kk = cfg.kernel_area() as u64;
        let pa = cfg.pooled_area() as u64;
        let encoders = if cfg.has_second_encoder() { 2 } else { 1 };
        Self {
            pool: c * (in_h * in_w) as u64 + if cfg.pool == PoolKind::Avg { c * pa } else { 0 },
            encode: encoders * c * d * pa,
            interact: if cfg.uses_g2() { d * c * o / cfg.groups as u64 } else { 0 },
            decode: (if cfg.uses_g1() { c } else { 0 } + if cfg.uses_g2() { o } else { 0 }) * d * kk,
            gate_multiply: o * c * kk,
        }
    }

    pub fn total(&self, conv: MacConvention, latent: usize) -> u64 {
        let interact = if conv.interact_latent_factor { self.interact } else { self.interact / latent.max(1) as u64 };
        (if conv.pooling { self.pool } else { 0 })
            + self.encode
            + interact
            + self.decode
            + if conv.gate_multiply { self.gate_multiply } else { 0 }
    }

    fn add(&mut self, o: &Self) {
        self.pool += o.pool;
        self.encode += o.encode;
        self.interact += o.interact;
        self.decode += o.decode;
        self.gate_multiply += o.gate_multiply;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub id: String,
    pub kind: &'static str,
    pub stage: String,
    pub output: Vec<usize>,
    /// Parameters excluding the gate path.
    pub params: u64,
    pub gate_params: u64,
    /// Convolution and linear MACs per sample.
    pub macs: u64,
    pub gate: GateMacs,
    /// Gate-path total under the report's convention.
    pub gate_macs: u64,
    /// Normalization, activation, pooling and residual-add operations.
    pub aux_ops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub arch: String,
    pub convention: MacConvention,
    pub layers: Vec<LayerCost>,
}

fn numel(s: &[usize]) -> u64 {
    s.iter().product::<usize>() as u64
}

fn layer_cost(l: &Layer, conv: MacConvention, out: &mut Vec<LayerCost>) {
    let mut lc = LayerCost {
        id: l.id.clone(),
        kind: l.kind(),
        stage: l.stage.clone(),
        output: l.output.clone(),
        params: 0,
        gate_params: 0,
        macs: 0,
        gate: GateMacs::default(),
        gate_macs: 0,
        aux_ops: 0,
    };
    match &l.op {
        LayerOp::Conv(c) => {
            let w = numel(&c.weight_shape());
            lc.params = w + if c.bias { c.out_channels as u64 } else { 0 };
            lc.macs = w * numel(&l.output[1..]);
            if let Some(g) = &c.gate {
                lc.gate_params = g.gate_params().total() as u64;
                lc.gate = GateMacs::of(g, l.input[1], l.input[2]);
                lc.gate_macs = lc.gate.total(conv, g.latent);
                // Gate-path normalizations and ReLUs over [c|o, d].
                let d = g.latent as u64;
                let normed = (g.in_channels as u64) * d * (u64::from(g.uses_g1()) + u64::from(g.has_norm_c2()))
                    + if g.uses_g2() { g.out_channels as u64 * d } else { 0 };
                lc.aux_ops = 3 * normed;
            }
        }
        LayerOp::Norm => {
            lc.params = 2 * l.input[0] as u64;
            lc.aux_ops = 2 * numel(&l.input);
        }
        LayerOp::Relu => lc.aux_ops = numel(&l.input),
        LayerOp::Pool(p) => lc.aux_ops = numel(&l.output) * (p.kernel * p.kernel) as u64,
        LayerOp::GlobalPool => lc.aux_ops = numel(&l.input) + l.output[0] as u64,
        LayerOp::Linear { in_features, out_features, bias } => {
            let w = (*in_features * *out_features) as u64;
            lc.params = w + if *bias { *out_features as u64 } else { 0 };
            lc.macs = w;
        }
        LayerOp::Residual { body, shortcut } => {
            // Residual add and the ReLU after it; children are listed separately.
            lc.aux_ops = 2 * numel(&l.output);
            out.push(lc);
            for b in body {
                layer_cost(b, conv, out);
            }
            if let Shortcut::Projection(p) = shortcut {
                for b in p {
                    layer_cost(b, conv, out);
                }
            }
            return;
        }
    }
    out.push(lc);
}

/// Per-layer and total costs; MACs are per sample.
pub fn count_macs(net: &Network, convention: MacConvention) -> CostReport {
    let mut layers = Vec::new();
    for l in &net.layers {
        layer_cost(l, convention, &mut layers);
    }
    CostReport { arch: net.name.clone(), convention, layers }
}

/// Same report under the calibrated MAC convention.
pub fn count_params(net: &Network) -> CostReport {
    count_macs(net, MacConvention::CALIBRATED)
}

/// Parameters of a naive gate generator producing the full `o x c x k1 x k2`
/// gate from an `l`-dimensional context vector, or of the variant producing
/// separate `o` and `c` factors.
pub fn naive_gate_cost(l: u64, o: u64, c: u64, kernel_area: u64, decomposed: bool) -> u64 {
    if decomposed {
        l * (o + c) * kernel_area
    } else {
        l * o * c * kernel_area
    }
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params + l.gate_params).sum()
    }

    pub fn base_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn gate_params(&self) -> u64 {
        self.layers.iter().map(|l| l.gate_params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn gate_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.gate_macs).sum()
    }

    pub fn gate_breakdown(&self) -> GateMacs {
        let mut g = GateMacs::default();
        for l in &self.layers {
            g.add(&l.gate);
        }
        g
    }

    pub fn aux_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.aux_ops).sum()
    }

    const HEADER: [&'static str; 9] = ["id", "kind", "stage", "output", "params", "gate_params", "macs", "gate_macs", "aux_ops"];

    fn rows(&self) -> Vec<[String; 9]> {
        self.layers
            .iter()
            .map(|l| {
                [
                    l.id.clone(),
                    l.kind.to_string(),
                    l.stage.clone(),
                    l.output.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x"),
                    l.params.to_string(),
                    l.gate_params.to_string(),
                    l.macs.to_string(),
                    l.gate_macs.to_string(),
                    l.aux_ops.to_string(),
                ]
            })
            .collect()
    }

    fn summary(&self) -> String {
        let g = self.gate_breakdown();
        let mut s = String::new();
        let _ = writeln!(s, "arch: {}", self.arch);
        let _ = writeln!(
            s,
            "params: {} ({:.2}M); base {} + gate {}",
            self.total_params(),
            self.total_params() as f64 / 1e6,
            self.base_params(),
            self.gate_params()
        );
        let _ = writeln!(s, "macs: {} ({:.3} GFLOPs, conv and linear)", self.total_macs(), self.total_macs() as f64 / 1e9);
        let _ = writeln!(
            s,
            "gate overhead: {} ({:.3} MFLOPs); pool {} encode {} interact {} decode {} gate_multiply {}",
            self.gate_macs(),
            self.gate_macs() as f64 / 1e6,
            g.pool,
            g.encode,
            g.interact,
            g.decode,
            g.gate_multiply
        );
        let c = self.convention;
        let _ = writeln!(
            s,
            "convention: interact_latent_factor={} gate_multiply={} pooling={}",
            c.interact_latent_factor, c.gate_multiply, c.pooling
        );
        let _ = write!(s, "aux ops: {}", self.aux_ops());
        s
    }

    /// Aligned text table followed by totals.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let mut width = Self::HEADER.map(str::len);
        for r in &rows {
            for (w, v) in width.iter_mut().zip(r) {
                *w = (*w).max(v.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(width)
                .enumerate()
                .map(|(i, (v, w))| if i < 4 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &Self::HEADER.map(String::from));
        for r in &rows {
            line(&mut s, r);
        }
        s.push('\n');
        s.push_str(&self.summary());
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::HEADER.join(",");
        s.push('\n');
        for r in self.rows() {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}
