//! Executable networks built from expanded architecture descriptors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Layer, LayerOp, Network, Shortcut};
use crate::cgc::{cgc_forward, CgcConfig, CgcParams, CgcRunning, CgcSlots, CgcTrace, GateEnv};
use crate::cgc::params::he_normal;
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, Mode, NormAxes, RunningStats, DEFAULT_EPS};
use crate::scalar::Scalar;
use crate::serialize::Checkpoint;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learning-rate class of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTag {
    Plain,
    /// Gate-path parameter of a gated convolution (everything but its kernel).
    GateExtra,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub tag: ParamTag,
}

/// Parameters, normalization statistics and the network they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub net: Network,
    pub params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    pub norm_stats: BTreeMap<String, RunningStats<T>>,
    pub gate_stats: BTreeMap<String, CgcRunning<T>>,
    pub eps: T,
}

/// Result of recording a forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// One variable per entry of [`Model::params`].
    pub params: Vec<Var>,
    /// Intermediates of the requested gated layer.
    pub captured: Option<CgcTrace>,
}

impl<T: Scalar> Model<T> {
    /// Fan-in scaled initialization: `N(0, 2/fan_in)` for convolution kernels
    /// and gate linears, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for the classifier, zero biases,
    /// unit/zero normalization affines except the zero-initialized gate
    /// normalizations, and running statistics (0, 1).
    pub fn init(net: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self {
            net: net.clone(),
            params: Vec::new(),
            index: BTreeMap::new(),
            norm_stats: BTreeMap::new(),
            gate_stats: BTreeMap::new(),
            eps: T::lit(DEFAULT_EPS),
        };
        for l in net.flat_layers() {
            match &l.op {
                LayerOp::Conv(c) => {
                    if let Some(cfg) = &c.gate {
                        let p: CgcParams<T> = CgcParams::init(cfg, &mut rng);
                        for (slot, t) in p.named() {
                            let tag = if slot == "weight" { ParamTag::Plain } else { ParamTag::GateExtra };
                            m.push(format!("{}.{slot}", l.id), t.clone(), tag);
                        }
                        m.gate_stats.insert(l.id.clone(), CgcRunning::identity(cfg));
                    } else {
                        let fan_in = c.in_channels / c.groups * c.kernel_area();
                        m.push(format!("{}.weight", l.id), he_normal(&c.weight_shape(), fan_in, &mut rng), ParamTag::Plain);
                    }
                    if c.bias {
                        m.push(format!("{}.bias", l.id), Tensor::zeros(&[c.out_channels]), ParamTag::Plain);
                    }
                }
                LayerOp::Norm => {
                    let ch = l.input[0];
                    m.push(format!("{}.gamma", l.id), Tensor::ones(&[ch]), ParamTag::Plain);
                    m.push(format!("{}.beta", l.id), Tensor::zeros(&[ch]), ParamTag::Plain);
                    m.norm_stats.insert(l.id.clone(), RunningStats::identity(ch));
                }
                LayerOp::Linear { in_features, out_features, bias } => {
                    let bound = 1.0 / (*in_features as f64).sqrt();
                    let w = Tensor::from_fn(&[*in_features, *out_features], |_| T::lit(rng.gen_range(-bound..bound)));
                    m.push(format!("{}.weight", l.id), w, ParamTag::Plain);
                    if *bias {
                        m.push(format!("{}.bias", l.id), Tensor::zeros(&[*out_features]), ParamTag::Plain);
                    }
                }
                _ => {}
            }
        }
        m
    }

    fn push(&mut self, name: String, value: Tensor<T>, tag: ParamTag) {
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, tag });
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records the network on `tape`. Train mode uses batch statistics and
    /// updates the running ones.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, capture: Option<&str>) -> Result<ForwardPass> {
        let mut pv = Vec::with_capacity(self.params.len());
        for p in &self.params {
            tape.set_scope(p.name.as_str());
            pv.push(tape.leaf(p.value.clone())?);
        }
        let layers = std::mem::take(&mut self.net.layers);
        let mut ctx = Exec { model: self, vars: &pv, mode, capture, captured: None };
        let out = ctx.run(tape, &layers, x);
        let captured = ctx.captured;
        self.net.layers = layers;
        Ok(ForwardPass { logits: out?, params: pv, captured })
    }

    /// Logits for a batch `[b, c, h, w]`.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let f = self.forward(&mut tape, xv, mode, None)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Gated kernels `[b, o, c, k..]` of layer `id` for a batch.
    pub fn modulated_kernels(&mut self, x: &Tensor<T>, id: &str, mode: Mode) -> Result<Tensor<T>> {
        if !self.net.cgc_layer_ids().iter().any(|l| l == id) {
            return Err(Error::Config(format!("layer `{id}` is not a gated convolution")));
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let f = self.forward(&mut tape, xv, mode, Some(id))?;
        let tr = f.captured.ok_or_else(|| Error::Config(format!("layer `{id}` was not reached")))?;
        Ok(tape.value(tr.kernels).clone())
    }

    pub fn checkpoint(&self, arch_json: &str) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.set("kind", "model");
        ck.set("scalar", T::NAME);
        ck.set("arch", arch_json.replace('\n', " "));
        for p in &self.params {
            ck.push(p.name.clone(), p.value.clone());
        }
        let mut stat = |name: String, rs: &RunningStats<T>| {
            let c = rs.mean.len();
            ck.push(format!("{name}.running_mean"), Tensor::new(&[c], rs.mean.clone()).expect("non-empty"));
            ck.push(format!("{name}.running_var"), Tensor::new(&[c], rs.var.clone()).expect("non-empty"));
        };
        for (id, rs) in &self.norm_stats {
            stat(id.clone(), rs);
        }
        for (id, g) in &self.gate_stats {
            for (n, rs) in g.named() {
                stat(format!("{id}.{n}"), rs);
            }
        }
        ck
    }

    /// Restores parameters and statistics for `net` from a checkpoint.
    pub fn from_checkpoint(net: &Network, ck: &Checkpoint<T>) -> Result<Self> {
        let mut m = Self::init(net, 0);
        for p in &mut m.params {
            let t = ck.require(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Parse(format!(
                    "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        let load = |name: &str, rs: &mut RunningStats<T>| -> Result<()> {
            let c = rs.mean.len();
            for (suffix, dst) in [("running_mean", &mut rs.mean), ("running_var", &mut rs.var)] {
                let t = ck.require(&format!("{name}.{suffix}"))?;
                t.expect_shape("checkpoint", &[c])?;
                *dst = t.data().to_vec();
            }
            Ok(())
        };
        for (id, rs) in m.norm_stats.iter_mut() {
            load(id, rs)?;
        }
        for (id, g) in m.gate_stats.iter_mut() {
            for (n, rs) in g.named_mut() {
                load(&format!("{id}.{n}"), rs)?;
            }
        }
        Ok(m)
    }
}

struct Exec<'a, T> {
    model: &'a mut Model<T>,
    vars: &'a [Var],
    mode: Mode,
    capture: Option<&'a str>,
    captured: Option<CgcTrace>,
}

impl<T: Scalar> Exec<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.model
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    fn run(&mut self, tape: &mut Tape<T>, layers: &[Layer], mut x: Var) -> Result<Var> {
        for l in layers {
            x = self.layer(tape, l, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, tape: &mut Tape<T>, l: &Layer, x: Var) -> Result<Var> {
        tape.set_scope(l.id.as_str());
        let y = match &l.op {
            LayerOp::Conv(c) => {
                let mut y = match &c.gate {
                    Some(cfg) => self.gated(tape, l, cfg, x)?,
                    None => {
                        let w = self.var(&format!("{}.weight", l.id))?;
                        tape.conv(x, w, &ConvSpec::new(&c.stride, &c.padding, c.groups))?
                    }
                };
                if c.bias {
                    let b = self.var(&format!("{}.bias", l.id))?;
                    let b = tape.reshape(b, &[1, c.out_channels, 1, 1])?;
                    y = tape.add(y, b)?;
                }
                y
            }
            LayerOp::Norm => {
                let g = self.var(&format!("{}.gamma", l.id))?;
                let b = self.var(&format!("{}.beta", l.id))?;
                let eps = self.model.eps;
                let rs = self.model.norm_stats.get_mut(&l.id);
                tape.norm(x, g, b, NormAxes::Channel(1), self.mode, rs, eps)?
            }
            LayerOp::Relu => tape.relu(x)?,
            LayerOp::Pool(p) => {
                let s = tape.shape(x).to_vec();
                if p.kernel != p.stride || p.padding != 0 || !s[2].is_multiple_of(p.kernel) || !s[3].is_multiple_of(p.kernel) {
                    return Err(Error::Config(format!(
                        "layer `{}`: only non-overlapping, unpadded pooling that tiles the input is executable",
                        l.id
                    )));
                }
                tape.adaptive_pool(x, &[s[2] / p.kernel, s[3] / p.kernel], p.kind)?
            }
            LayerOp::GlobalPool => {
                let s = tape.shape(x).to_vec();
                let y = tape.adaptive_pool(x, &[1, 1], crate::ops::PoolKind::Avg)?;
                tape.reshape(y, &[s[0], s[1]])?
            }
            LayerOp::Linear { out_features, bias, .. } => {
                let w = self.var(&format!("{}.weight", l.id))?;
                let mut y = tape.grouped_linear(x, w, 1)?;
                if *bias {
                    let b = self.var(&format!("{}.bias", l.id))?;
                    let b = tape.reshape(b, &[1, *out_features])?;
                    y = tape.add(y, b)?;
                }
                y
            }
            LayerOp::Residual { body, shortcut } => {
                let main = self.run(tape, body, x)?;
                tape.set_scope(l.id.as_str());
                let skip = match shortcut {
                    Shortcut::Identity => x,
                    Shortcut::ZeroPad { stride } => tape.subsample_pad(x, *stride, l.output[0])?,
                    Shortcut::Projection(p) => self.run(tape, p, x)?,
                };
                tape.set_scope(l.id.as_str());
                let s = tape.add(main, skip)?;
                tape.relu(s)?
            }
        };
        Ok(y)
    }

    fn gated(&mut self, tape: &mut Tape<T>, l: &Layer, cfg: &CgcConfig, x: Var) -> Result<Var> {
        let vars = CgcSlots::build(cfg, |slot, _| self.var(&format!("{}.{slot}", l.id)))?;
        let eps = self.model.eps;
        let running = self
            .model
            .gate_stats
            .get_mut(&l.id)
            .ok_or_else(|| Error::Config(format!("missing gate statistics for `{}`", l.id)))?;
        let mut env = GateEnv { cfg, vars: &vars, running, mode: self.mode, eps };
        let tr = cgc_forward(tape, &mut env, x)?;
        if self.capture == Some(l.id.as_str()) {
            self.captured = Some(tr);
        }
        Ok(tr.out)
    }
}
