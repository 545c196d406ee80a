//! Central-difference verification of vector-Jacobian products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::ops::{self, Binary, ConvSpec, Mode, NormAxes, PoolKind, RunningStats, Unary};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// An operation paired with its vector-Jacobian product.
pub trait DualOp<T: Scalar> {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;
    /// One gradient per input, shaped like that input.
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step, within `[1e-7, 1e-4]`.
    pub eps: f64,
    /// Denominator floor: the error of an element is
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Seed of the random output projection.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Input and element index of the worst error.
    pub worst: (usize, usize),
    pub elements: usize,
}

/// Maximum relative error between `op.vjp` and central differences of a
/// random scalar projection `sum(r * op.forward(inputs))`.
pub fn gradcheck(op: &dyn DualOp<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    Ok(gradcheck_with(op, inputs, GradcheckOptions { eps, ..Default::default() })?.max_rel_error)
}

pub fn gradcheck_with(op: &dyn DualOp<f64>, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport> {
    const OP: &str = "gradcheck";
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(arg_err(OP, format!("eps {} outside [1e-7, 1e-4]", opts.eps)));
    }
    let probe = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let y = op.forward(xs)?;
        if !y.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                layer: "gradcheck probe".into(),
            });
        }
        Ok(y)
    };
    let y0 = probe(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = Tensor::from_fn(y0.shape(), |_| rng.gen_range(-1.0..1.0));
    let analytic = op.vjp(inputs, &r)?;
    if analytic.len() != inputs.len() {
        return Err(arg_err(OP, format!("{} gradients for {} inputs", analytic.len(), inputs.len())));
    }
    let mut xs = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        elements: 0,
    };
    for (k, grad) in analytic.iter().enumerate() {
        grad.expect_shape("gradcheck (vjp output)", inputs[k].shape())?;
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + opts.eps;
            let fp = probe(&xs)?.dot(&r)?;
            xs[k].data_mut()[i] = orig - opts.eps;
            let fm = probe(&xs)?.dot(&r)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if !err.is_finite() {
                return Err(Error::NonFinite {
                    op: op.name(),
                    layer: "gradcheck comparison".into(),
                });
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
            report.elements += 1;
        }
    }
    Ok(report)
}

pub struct ConvOp(pub ConvSpec);

impl<T: Scalar> DualOp<T> for ConvOp {
    fn name(&self) -> String {
        "conv_nd".into()
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        ops::conv_nd(&inputs[0], &inputs[1], &self.0)
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (gx, gw) = ops::conv_nd_vjp(&inputs[0], &inputs[1], &self.0, upstream)?;
        Ok(vec![gx, gw])
    }
}

pub struct PoolOp {
    pub out: Vec<usize>,
    pub kind: PoolKind,
}

impl<T: Scalar> DualOp<T> for PoolOp {
    fn name(&self) -> String {
        format!("adaptive_pool({:?})", self.kind)
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        ops::adaptive_pool(&inputs[0], &self.out, self.kind)
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![ops::adaptive_pool_vjp(&inputs[0], &self.out, self.kind, upstream)?])
    }
}

pub struct LinearOp {
    pub groups: usize,
}

impl<T: Scalar> DualOp<T> for LinearOp {
    fn name(&self) -> String {
        "grouped_linear".into()
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        ops::grouped_linear(&inputs[0], &inputs[1], self.groups)
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (gx, gw) = ops::grouped_linear_vjp(&inputs[0], &inputs[1], self.groups, upstream)?;
        Ok(vec![gx, gw])
    }
}

/// Inputs: `[x, gamma, beta]`. Eval mode reads the fixed `running` statistics.
pub struct NormOp<T> {
    pub axes: NormAxes,
    pub mode: Mode,
    pub running: Option<RunningStats<T>>,
    pub eps: f64,
}

impl<T: Scalar> NormOp<T> {
    fn run(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, ops::NormCache<T>)> {
        let mut rs = self.running.clone();
        let running = if self.mode == Mode::Eval { rs.as_mut() } else { None };
        ops::affine_norm(&inputs[0], self.axes, &inputs[1], &inputs[2], self.mode, running, T::lit(self.eps))
    }
}

impl<T: Scalar> DualOp<T> for NormOp<T> {
    fn name(&self) -> String {
        format!("affine_norm({:?}, {:?})", self.axes, self.mode)
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(self.run(inputs)?.0)
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, cache) = self.run(inputs)?;
        let (gx, gg, gb) = ops::affine_norm_vjp(&cache, self.axes, &inputs[1], upstream)?;
        Ok(vec![gx, gg, gb])
    }
}

pub struct UnaryOp(pub Unary);

impl<T: Scalar> DualOp<T> for UnaryOp {
    fn name(&self) -> String {
        format!("{:?}", self.0)
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(ops::unary(&inputs[0], self.0))
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let y = ops::unary(&inputs[0], self.0);
        Ok(vec![ops::unary_vjp(&inputs[0], &y, self.0, upstream)?])
    }
}

pub struct BinaryOp(pub Binary);

impl<T: Scalar> DualOp<T> for BinaryOp {
    fn name(&self) -> String {
        format!("{:?}", self.0)
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        ops::binary(&inputs[0], &inputs[1], self.0)
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (ga, gb) = ops::binary_vjp(&inputs[0], &inputs[1], self.0, upstream)?;
        Ok(vec![ga, gb])
    }
}

/// A composite operation expressed as a tape program over its inputs.
pub struct TapeFn<F> {
    pub name: String,
    pub build: F,
}

impl<F> TapeFn<F> {
    pub fn new(name: impl Into<String>, build: F) -> Self {
        Self { name: name.into(), build }
    }
}

impl<T: Scalar, F> DualOp<T> for TapeFn<F>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    fn name(&self) -> String {
        self.name.clone()
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }
    fn vjp(&self, inputs: &[Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = (self.build)(&mut tape, &vars)?;
        let grads = tape.backward_with(out, upstream.clone())?;
        Ok(vars.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect())
    }
}

/// Tolerance on the maximum relative error of a composite operation.
pub const SUITE_TOL: f64 = 1e-4;
/// Tolerance for operations linear in every input.
pub const LINEAR_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
    pub tol: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random parameters for every slot; normalization scales stay away from 0
/// so no path through the gate is degenerate.
fn randomized_layer(cfg: crate::cgc::CgcConfig, rng: &mut ChaCha8Rng) -> Result<crate::cgc::CgcLayer<f64>> {
    let mut layer = crate::cgc::CgcLayer::new(cfg, rng);
    for (name, t) in layer.params.named_mut() {
        *t = if name.ends_with(".gamma") {
            uniform(t.shape(), 0.5, 1.5, rng)
        } else {
            uniform(t.shape(), -0.5, 0.5, rng)
        };
    }
    Ok(layer)
}

fn entry(name: String, op: &dyn DualOp<f64>, inputs: &[Tensor<f64>], tol: f64, seed: u64) -> Result<SuiteEntry> {
    let r = gradcheck_with(op, inputs, GradcheckOptions { seed, ..Default::default() })?;
    Ok(SuiteEntry { name, max_rel_error: r.max_rel_error, elements: r.elements, tol })
}

/// Gradient checks of every named gate variant (train mode, plus the default
/// variant in eval mode), the sequence layer and the linear building blocks.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::cgc::{CgcConfig, GateOptions, SeqCgcLayer, SeqConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for name in GateOptions::VARIANTS {
        let mut opts = GateOptions::variant(name)?;
        opts.groups.get_or_insert(2);
        let cfg = CgcConfig::new(8, 8, &[3, 3], &[1, 1], &[1, 1], &opts)?;
        let layer = randomized_layer(cfg, &mut rng)?;
        let x = uniform(&[2, 8, 5, 5], -1.0, 1.0, &mut rng);
        let inputs = layer.dual_inputs(&x);
        out.push(entry(format!("cgc/{name}"), &layer.as_dual_op(Mode::Train), &inputs, SUITE_TOL, seed)?);
        if name == "default" {
            let mut warm = layer.clone();
            warm.forward(&x, Mode::Train)?;
            out.push(entry("cgc/default/eval".into(), &warm.as_dual_op(Mode::Eval), &inputs, SUITE_TOL, seed)?);
        }
    }

    let cfg = SeqConfig::new(8, 2, 3)?;
    let mut seq = SeqCgcLayer::<f64>::new(cfg.clone(), &mut rng);
    seq.params.norm = [uniform(&[cfg.latent], 0.5, 1.5, &mut rng), uniform(&[cfg.latent], -0.5, 0.5, &mut rng)];
    let s = uniform(&[2, 8, 7], -1.0, 1.0, &mut rng);
    let eps = seq.eps;
    let seq_op = TapeFn::new("cgc_seq", move |tape: &mut Tape<f64>, v: &[Var]| {
        let vars = crate::cgc::SeqSlots { weight: v[1], encoder: v[2], decoder: v[3], norm: [v[4], v[5]] };
        Ok(crate::cgc::cgc_seq_forward(tape, &cfg, &vars, v[0], eps)?.out)
    });
    let mut inputs = vec![s];
    inputs.extend(seq.params.named().into_iter().map(|(_, t)| t.clone()));
    out.push(entry("cgc_seq".into(), &seq_op, &inputs, SUITE_TOL, seed)?);

    let x = uniform(&[3, 4, 6], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 2], -1.0, 1.0, &mut rng);
    out.push(entry("grouped_linear".into(), &LinearOp { groups: 2 }, &[x, w], LINEAR_TOL, seed)?);
    let x = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
    let w = uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
    out.push(entry("conv".into(), &ConvOp(ConvSpec::new(&[2, 1], &[1, 1], 2)), &[x, w], LINEAR_TOL, seed)?);
    Ok(out)
}
