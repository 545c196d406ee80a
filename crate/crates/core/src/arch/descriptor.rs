//! JSON architecture descriptors and their expansion into a validated layer
//! graph with inferred shapes.
//!
//! A descriptor lists layers in order; `stage` entries expand into residual
//! blocks. Example:
//!
//! ```json
//! { "name": "net", "input": [3, 32, 32], "layers": [
//!     { "kind": "conv", "out": 16, "kernel": 3 },
//!     { "kind": "norm" }, { "kind": "relu" },
//!     { "kind": "stage", "id": "res1", "block": "basic", "blocks": 2, "width": 16 },
//!     { "kind": "global_pool" },
//!     { "kind": "linear", "out": 10 } ] }
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cgc::{CgcConfig, GateOptions};
use crate::error::{Error, Result};
use crate::ops::{conv_out_extent, PoolKind};

/// A scalar applied to every spatial axis, or one value per axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Extent {
    Same(usize),
    PerAxis(Vec<usize>),
}

impl Extent {
    fn resolve(&self, rank: usize, what: &str) -> Result<Vec<usize>> {
        match self {
            Extent::Same(v) => Ok(vec![*v; rank]),
            Extent::PerAxis(v) if v.len() == rank => Ok(v.clone()),
            Extent::PerAxis(v) => Err(Error::Arch(format!("{what} {v:?} needs {rank} entries"))),
        }
    }
}

fn one() -> Extent {
    Extent::Same(1)
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand by 4.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    /// Subsample and zero-pad channels; no parameters.
    ZeroPad,
    /// 1x1 convolution plus normalization.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
        out: usize,
        kernel: Extent,
        #[serde(default = "one")]
        stride: Extent,
        /// Defaults to `kernel / 2` per axis.
        #[serde(default)]
        padding: Option<Extent>,
        #[serde(default = "one_usize")]
        groups: usize,
        #[serde(default)]
        bias: bool,
    },
    CgcConv {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
        out: usize,
        kernel: Extent,
        #[serde(default = "one")]
        stride: Extent,
        #[serde(default)]
        padding: Option<Extent>,
        #[serde(default)]
        gate: GateOptions,
    },
    Norm {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
    },
    Relu {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
    },
    Pool {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
        #[serde(default)]
        pool: PoolKind,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    GlobalPool {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
    },
    Linear {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        stage: Option<String>,
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Stage {
        id: String,
        block: BlockKind,
        blocks: usize,
        width: usize,
        /// Stride of the first block.
        #[serde(default = "one_usize")]
        stride: usize,
        #[serde(default = "default_shortcut")]
        shortcut: ShortcutKind,
    },
}

fn default_shortcut() -> ShortcutKind {
    ShortcutKind::Projection
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub name: String,
    /// `[c, h, w]`
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| Error::Arch(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build(&self) -> Result<Network> {
        Network::from_descriptor(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
    pub bias: bool,
    /// Present when the convolution is context-gated.
    pub gate: Option<CgcConfig>,
}

impl ConvLayer {
    pub fn kernel_area(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels / self.groups];
        s.extend_from_slice(&self.kernel);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    ZeroPad { stride: usize },
    Projection(Vec<Layer>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv(ConvLayer),
    Norm,
    Relu,
    Pool(PoolLayer),
    GlobalPool,
    Linear { in_features: usize, out_features: usize, bias: bool },
    /// `relu(body(x) + shortcut(x))`
    Residual { body: Vec<Layer>, shortcut: Shortcut },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: String,
    pub stage: String,
    /// Per-sample input shape: `[c, h, w]`, or `[features]` after global pooling.
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub op: LayerOp,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match &self.op {
            LayerOp::Conv(c) if c.gate.is_some() => "cgc_conv",
            LayerOp::Conv(_) => "conv",
            LayerOp::Norm => "norm",
            LayerOp::Relu => "relu",
            LayerOp::Pool(_) => "pool",
            LayerOp::GlobalPool => "global_pool",
            LayerOp::Linear { .. } => "linear",
            LayerOp::Residual { .. } => "residual",
        }
    }
}

/// An expanded, shape-checked architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub name: String,
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
}

struct Builder {
    shape: Vec<usize>,
    index: usize,
    ids: BTreeSet<String>,
}

fn link_err(id: &str, detail: impl std::fmt::Display) -> Error {
    Error::Arch(format!("chain broken at layer `{id}`: {detail}"))
}

impl Builder {
    fn id(&mut self, given: &Option<String>, kind: &str) -> Result<String> {
        self.index += 1;
        let id = given.clone().unwrap_or_else(|| format!("{kind}{}", self.index));
        if !self.ids.insert(id.clone()) {
            return Err(Error::Arch(format!("duplicate layer id `{id}`")));
        }
        Ok(id)
    }

    fn spatial(&self, id: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(link_err(id, format!("expected a [c, h, w] input, got {:?}", self.shape))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: String,
        stage: &str,
        out: usize,
        kernel: &[usize],
        stride: &[usize],
        padding: &[usize],
        groups: usize,
        bias: bool,
        gate: Option<&GateOptions>,
    ) -> Result<Layer> {
        let (c, h, w) = self.spatial(&id)?;
        if out == 0 || groups == 0 || c % groups != 0 || !out.is_multiple_of(groups) {
            return Err(link_err(&id, format!("{c} -> {out} channels incompatible with {groups} groups")));
        }
        let ho = conv_out_extent(h, kernel[0], stride[0], padding[0]);
        let wo = conv_out_extent(w, kernel[1], stride[1], padding[1]);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(link_err(&id, format!("kernel {kernel:?} does not fit input {h}x{w}")));
        };
        let gate = match gate {
            Some(opts) => {
                if groups != 1 {
                    return Err(link_err(&id, "gated convolutions must have one group"));
                }
                Some(CgcConfig::new(c, out, kernel, stride, padding, opts).map_err(|e| link_err(&id, e))?)
            }
            None => None,
        };
        let input = self.shape.clone();
        self.shape = vec![out, ho, wo];
        Ok(Layer {
            id,
            stage: stage.to_string(),
            input,
            output: self.shape.clone(),
            op: LayerOp::Conv(ConvLayer {
                in_channels: c,
                out_channels: out,
                kernel: kernel.to_vec(),
                stride: stride.to_vec(),
                padding: padding.to_vec(),
                groups,
                bias,
                gate,
            }),
        })
    }

    fn simple(&mut self, id: String, stage: &str, op: LayerOp) -> Result<Layer> {
        let input = self.shape.clone();
        match &op {
            LayerOp::Norm | LayerOp::Relu => {}
            LayerOp::GlobalPool => {
                let (c, _, _) = self.spatial(&id)?;
                self.shape = vec![c];
            }
            LayerOp::Pool(p) => {
                let (c, h, w) = self.spatial(&id)?;
                let ho = conv_out_extent(h, p.kernel, p.stride, p.padding);
                let wo = conv_out_extent(w, p.kernel, p.stride, p.padding);
                let (Some(ho), Some(wo)) = (ho, wo) else {
                    return Err(link_err(&id, format!("pool window {} does not fit input {h}x{w}", p.kernel)));
                };
                self.shape = vec![c, ho, wo];
            }
            LayerOp::Linear { in_features, out_features, .. } => {
                if self.shape != [*in_features] {
                    return Err(link_err(&id, format!("linear expects [{in_features}], got {:?}", self.shape)));
                }
                self.shape = vec![*out_features];
            }
            _ => unreachable!("handled by dedicated builders"),
        }
        Ok(Layer { id, stage: stage.to_string(), input, output: self.shape.clone(), op })
    }

    fn block(&mut self, stage: &str, prefix: String, kind: BlockKind, width: usize, stride: usize, shortcut: ShortcutKind) -> Result<Layer> {
        self.ids.insert(prefix.clone()).then_some(()).ok_or_else(|| Error::Arch(format!("duplicate layer id `{prefix}`")))?;
        let input = self.shape.clone();
        let (c, _, _) = self.spatial(&prefix)?;
        let sub = |n: &str| format!("{prefix}.{n}");
        let mut body = Vec::new();
        let s2 = [stride, stride];
        let out = match kind {
            BlockKind::Basic => {
                body.push(self.conv(sub("conv1"), stage, width, &[3, 3], &s2, &[1, 1], 1, false, None)?);
                body.push(self.simple(sub("bn1"), stage, LayerOp::Norm)?);
                body.push(self.simple(sub("relu1"), stage, LayerOp::Relu)?);
                body.push(self.conv(sub("conv2"), stage, width, &[3, 3], &[1, 1], &[1, 1], 1, false, None)?);
                body.push(self.simple(sub("bn2"), stage, LayerOp::Norm)?);
                width
            }
            BlockKind::Bottleneck => {
                body.push(self.conv(sub("conv1"), stage, width, &[1, 1], &[1, 1], &[0, 0], 1, false, None)?);
                body.push(self.simple(sub("bn1"), stage, LayerOp::Norm)?);
                body.push(self.simple(sub("relu1"), stage, LayerOp::Relu)?);
                body.push(self.conv(sub("conv2"), stage, width, &[3, 3], &s2, &[1, 1], 1, false, None)?);
                body.push(self.simple(sub("bn2"), stage, LayerOp::Norm)?);
                body.push(self.simple(sub("relu2"), stage, LayerOp::Relu)?);
                body.push(self.conv(sub("conv3"), stage, 4 * width, &[1, 1], &[1, 1], &[0, 0], 1, false, None)?);
                body.push(self.simple(sub("bn3"), stage, LayerOp::Norm)?);
                4 * width
            }
        };
        let body_out = self.shape.clone();
        let shortcut = if stride == 1 && c == out {
            Shortcut::Identity
        } else {
            match shortcut {
                ShortcutKind::ZeroPad => {
                    if out < c {
                        return Err(link_err(&prefix, "zero-pad shortcut cannot reduce channels"));
                    }
                    Shortcut::ZeroPad { stride }
                }
                ShortcutKind::Projection => {
                    self.shape = input.clone();
                    let conv = self.conv(sub("shortcut.conv"), stage, out, &[1, 1], &s2, &[0, 0], 1, false, None)?;
                    let bn = self.simple(sub("shortcut.bn"), stage, LayerOp::Norm)?;
                    Shortcut::Projection(vec![conv, bn])
                }
            }
        };
        let (_, h, w) = self.spatial(&prefix).unwrap_or((0, 0, 0));
        let (_, bh, bw) = (body_out[0], body_out[1], body_out[2]);
        if let Shortcut::ZeroPad { stride } = shortcut {
            let (ih, iw) = (input[1], input[2]);
            if ih.div_ceil(stride) != bh || iw.div_ceil(stride) != bw {
                return Err(link_err(&prefix, "shortcut and body spatial sizes differ"));
            }
        } else if (h, w) != (bh, bw) {
            return Err(link_err(&prefix, "shortcut and body spatial sizes differ"));
        }
        self.shape = body_out;
        Ok(Layer { id: prefix, stage: stage.to_string(), input, output: self.shape.clone(), op: LayerOp::Residual { body, shortcut } })
    }
}

fn same_padding(kernel: &[usize]) -> Vec<usize> {
    kernel.iter().map(|k| k / 2).collect()
}

impl Network {
    pub fn from_descriptor(d: &ArchDescriptor) -> Result<Self> {
        if d.input.len() != 3 || d.input.contains(&0) {
            return Err(Error::Arch(format!("input must be [c, h, w] with positive extents, got {:?}", d.input)));
        }
        let mut b = Builder { shape: d.input.clone(), index: 0, ids: BTreeSet::new() };
        let mut layers = Vec::new();
        let mut seen_stage = false;
        let default_stage = |seen: bool| if seen { "head" } else { "stem" };
        for spec in &d.layers {
            let stage_of = |s: &Option<String>| s.clone().unwrap_or_else(|| default_stage(seen_stage).to_string());
            match spec {
                LayerSpec::Conv { id, stage, out, kernel, stride, padding, groups, bias } => {
                    let id = b.id(id, "conv")?;
                    let k = kernel.resolve(2, "kernel")?;
                    let s = stride.resolve(2, "stride")?;
                    let p = match padding {
                        Some(p) => p.resolve(2, "padding")?,
                        None => same_padding(&k),
                    };
                    layers.push(b.conv(id, &stage_of(stage), *out, &k, &s, &p, *groups, *bias, None)?);
                }
                LayerSpec::CgcConv { id, stage, out, kernel, stride, padding, gate } => {
                    let id = b.id(id, "cgc_conv")?;
                    let k = kernel.resolve(2, "kernel")?;
                    let s = stride.resolve(2, "stride")?;
                    let p = match padding {
                        Some(p) => p.resolve(2, "padding")?,
                        None => same_padding(&k),
                    };
                    layers.push(b.conv(id, &stage_of(stage), *out, &k, &s, &p, 1, false, Some(gate))?);
                }
                LayerSpec::Norm { id, stage } => {
                    let id = b.id(id, "norm")?;
                    layers.push(b.simple(id, &stage_of(stage), LayerOp::Norm)?);
                }
                LayerSpec::Relu { id, stage } => {
                    let id = b.id(id, "relu")?;
                    layers.push(b.simple(id, &stage_of(stage), LayerOp::Relu)?);
                }
                LayerSpec::Pool { id, stage, pool, kernel, stride, padding } => {
                    let id = b.id(id, "pool")?;
                    if *kernel == 0 || *stride == 0 {
                        return Err(link_err(&id, "pool kernel and stride must be positive"));
                    }
                    let op = LayerOp::Pool(PoolLayer { kind: *pool, kernel: *kernel, stride: *stride, padding: *padding });
                    layers.push(b.simple(id, &stage_of(stage), op)?);
                }
                LayerSpec::GlobalPool { id, stage } => {
                    let id = b.id(id, "global_pool")?;
                    layers.push(b.simple(id, &stage_of(stage), LayerOp::GlobalPool)?);
                }
                LayerSpec::Linear { id, stage, out, bias } => {
                    let id = b.id(id, "linear")?;
                    let in_features = match b.shape[..] {
                        [f] => f,
                        _ => return Err(link_err(&id, format!("linear needs a pooled [features] input, got {:?}", b.shape))),
                    };
                    let op = LayerOp::Linear { in_features, out_features: *out, bias: *bias };
                    layers.push(b.simple(id, &stage_of(stage), op)?);
                }
                LayerSpec::Stage { id, block, blocks, width, stride, shortcut } => {
                    if *blocks == 0 || *width == 0 || *stride == 0 {
                        return Err(Error::Arch(format!("stage `{id}`: blocks, width and stride must be positive")));
                    }
                    seen_stage = true;
                    for i in 0..*blocks {
                        let s = if i == 0 { *stride } else { 1 };
                        layers.push(b.block(id, format!("{id}.{i}"), *block, *width, s, *shortcut)?);
                    }
                }
            }
        }
        Ok(Self { name: d.name.clone(), input: d.input.clone(), layers })
    }

    /// Stage labels in order of first appearance.
    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.layers {
            if !out.contains(&l.stage) {
                out.push(l.stage.clone());
            }
        }
        out
    }

    /// Every layer in execution order, descending into residual bodies and
    /// projection shortcuts.
    pub fn flat_layers(&self) -> Vec<&Layer> {
        fn walk<'a>(ls: &'a [Layer], out: &mut Vec<&'a Layer>) {
            for l in ls {
                out.push(l);
                if let LayerOp::Residual { body, shortcut } = &l.op {
                    walk(body, out);
                    if let Shortcut::Projection(p) = shortcut {
                        walk(p, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    fn for_each_conv_mut(&mut self, f: &mut dyn FnMut(&str, &mut ConvLayer) -> Result<()>) -> Result<()> {
        fn walk(ls: &mut [Layer], f: &mut dyn FnMut(&str, &mut ConvLayer) -> Result<()>) -> Result<()> {
            for l in ls {
                match &mut l.op {
                    LayerOp::Conv(c) => f(&l.stage, c).map_err(|e| Error::Arch(format!("layer `{}`: {e}", l.id)))?,
                    LayerOp::Residual { body, shortcut } => {
                        walk(body, f)?;
                        if let Shortcut::Projection(p) = shortcut {
                            walk(p, f)?;
                        }
                    }
                    _ => {}
                }
            }
            Ok(())
        }
        walk(&mut self.layers, f)
    }

    /// Gates every ungrouped convolution with spatial kernel size > 1 in the
    /// given stages (all stages when `stages` is `None`). Existing gates are
    /// replaced.
    pub fn with_cgc(&self, opts: &GateOptions, stages: Option<&BTreeSet<String>>) -> Result<Self> {
        if let Some(set) = stages {
            let known: BTreeSet<String> = self.stages().into_iter().collect();
            if let Some(bad) = set.iter().find(|s| !known.contains(*s)) {
                return Err(Error::Arch(format!(
                    "unknown stage `{bad}` (known: {})",
                    known.iter().cloned().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        let mut net = self.clone();
        net.for_each_conv_mut(&mut |stage, c| {
            let selected = stages.is_none_or(|s| s.contains(stage));
            if selected && c.kernel_area() > 1 && c.groups == 1 {
                c.gate = Some(CgcConfig::new(c.in_channels, c.out_channels, &c.kernel, &c.stride, &c.padding, opts)?);
            }
            Ok(())
        })?;
        Ok(net)
    }

    /// The same network with every gate removed.
    pub fn without_cgc(&self) -> Self {
        let mut net = self.clone();
        net.for_each_conv_mut(&mut |_, c| {
            c.gate = None;
            Ok(())
        })
        .expect("infallible");
        net
    }

    /// Ids of gated convolutions in execution order.
    pub fn cgc_layer_ids(&self) -> Vec<String> {
        self.flat_layers()
            .into_iter()
            .filter(|l| matches!(&l.op, LayerOp::Conv(c) if c.gate.is_some()))
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input[..], |l| &l.output[..])
    }
}

/// Keeps gates only in `stages`; an empty set yields the ungated network.
pub fn stage_filter(net: &Network, opts: &GateOptions, stages: &BTreeSet<String>) -> Result<Network> {
    if stages.is_empty() {
        return Ok(net.without_cgc());
    }
    net.without_cgc().with_cgc(opts, Some(stages))
}
