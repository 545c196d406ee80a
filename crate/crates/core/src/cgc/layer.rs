use rand::Rng;

use super::config::CgcConfig;
use super::graph::{cgc_forward, GateEnv};
use super::params::{CgcParams, CgcRunning, CgcVars};
use crate::error::{Error, Result};
use crate::gradcheck::DualOp;
use crate::ops::{self, ConvSpec, Mode, RunningStats, DEFAULT_EPS};
use crate::scalar::Scalar;
use crate::serialize::Checkpoint;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct CgcOutputs<T> {
    pub context_decode: Option<Tensor<T>>,
    pub context_interact: Option<Tensor<T>>,
    pub interacted: Option<Tensor<T>>,
    pub gate: Tensor<T>,
    pub kernels: Tensor<T>,
    pub out: Tensor<T>,
}

/// A context-gated convolution with its own parameters and running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CgcLayer<T> {
    pub config: CgcConfig,
    pub params: CgcParams<T>,
    pub running: CgcRunning<T>,
    pub eps: T,
}

impl<T: Scalar> CgcLayer<T> {
    pub fn new<R: Rng + ?Sized>(config: CgcConfig, rng: &mut R) -> Self {
        let params = CgcParams::init(&config, rng);
        let running = CgcRunning::identity(&config);
        Self { config, params, running, eps: T::lit(DEFAULT_EPS) }
    }

    pub fn from_params(config: CgcConfig, params: CgcParams<T>) -> Result<Self> {
        let p = CgcParams::from_lookup(&config, |name| {
            params
                .named()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing")))
        })?;
        let running = CgcRunning::identity(&config);
        Ok(Self { config, params: p, running, eps: T::lit(DEFAULT_EPS) })
    }

    /// Runs the layer and returns every intermediate. Train mode updates the
    /// running statistics.
    pub fn trace(&mut self, x: &Tensor<T>, mode: Mode) -> Result<CgcOutputs<T>> {
        let mut tape = Tape::new();
        tape.set_scope("cgc");
        let vars = self.params.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let mut env = GateEnv { cfg: &self.config, vars: &vars, running: &mut self.running, mode, eps: self.eps };
        let tr = cgc_forward(&mut tape, &mut env, xv)?;
        let get = |v: Option<_>| v.map(|v| tape.value(v).clone());
        Ok(CgcOutputs {
            context_decode: get(tr.context.decode),
            context_interact: get(tr.context.interact),
            interacted: get(tr.interacted),
            gate: tape.value(tr.gate).clone(),
            kernels: tape.value(tr.kernels).clone(),
            out: tape.value(tr.out).clone(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.trace(x, mode)?.out)
    }

    /// Gated kernels `[b, o, c, k..]` for a batch.
    pub fn modulated_kernels(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.trace(x, mode)?.kernels)
    }

    /// The convolution with the shared, ungated kernel.
    pub fn plain_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv_nd(x, &self.params.weight, &ConvSpec::new(&self.config.stride, &self.config.padding, 1))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new();
        ck.set("kind", "cgc_layer");
        ck.set("scalar", T::NAME);
        ck.set("eps", self.eps.as_f64());
        ck.set("config", serde_json::to_string(&self.config)?);
        for (n, t) in self.params.named() {
            ck.push(n, t.clone());
        }
        for (n, rs) in self.running.named() {
            let c = rs.mean.len();
            ck.push(format!("{n}.running_mean"), Tensor::new(&[c], rs.mean.clone())?);
            ck.push(format!("{n}.running_var"), Tensor::new(&[c], rs.var.clone())?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let cfg_json = ck.config.get("config").ok_or_else(|| Error::Parse("checkpoint has no `config`".into()))?;
        let config: CgcConfig = serde_json::from_str(cfg_json)?;
        config.validate()?;
        let params = CgcParams::from_lookup(&config, |n| ck.require(n).cloned())?;
        let mut running = CgcRunning::identity(&config);
        for (n, rs) in running.named_mut() {
            let c = rs.mean.len();
            let load = |suffix: &str| -> Result<Vec<T>> {
                let t = ck.require(&format!("{n}.{suffix}"))?;
                t.expect_shape("checkpoint", &[c])?;
                Ok(t.data().to_vec())
            };
            *rs = RunningStats { mean: load("running_mean")?, var: load("running_var")? };
        }
        let eps = match ck.config.get("eps") {
            Some(s) => T::lit(s.parse::<f64>().map_err(|e| Error::Parse(format!("eps `{s}`: {e}")))?),
            None => T::lit(DEFAULT_EPS),
        };
        Ok(Self { config, params, running, eps })
    }
}

impl CgcLayer<f64> {
    /// The layer as a function of `[x, parameters..]` for gradient checks.
    /// Eval mode reads a frozen copy of the running statistics.
    pub fn as_dual_op(&self, mode: Mode) -> CgcOp {
        CgcOp { config: self.config.clone(), running: self.running.clone(), mode, eps: self.eps }
    }

    /// `[x, parameters..]` in the order [`CgcLayer::as_dual_op`] expects.
    pub fn dual_inputs(&self, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
        std::iter::once(x.clone()).chain(self.params.named().into_iter().map(|(_, t)| t.clone())).collect()
    }
}

pub struct CgcOp {
    pub config: CgcConfig,
    pub running: CgcRunning<f64>,
    pub mode: Mode,
    pub eps: f64,
}

impl CgcOp {
    fn run(&self, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<crate::tape::Var>, crate::tape::Var)> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let pv = CgcVars::from_slice(&self.config, &vars[1..])?;
        let mut running = self.running.clone();
        let mut no_stats = CgcRunning { norm_c1: None, norm_c2: None, norm_o: None };
        let running = if self.mode == Mode::Eval { &mut running } else { &mut no_stats };
        let mut env = GateEnv { cfg: &self.config, vars: &pv, running, mode: self.mode, eps: self.eps };
        let out = cgc_forward(&mut tape, &mut env, vars[0])?.out;
        Ok((tape, vars, out))
    }
}

impl DualOp<f64> for CgcOp {
    fn name(&self) -> String {
        format!("cgc({:?}, {:?})", self.config.combine, self.mode)
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let (tape, _, out) = self.run(inputs)?;
        Ok(tape.value(out).clone())
    }
    fn vjp(&self, inputs: &[Tensor<f64>], upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (tape, vars, out) = self.run(inputs)?;
        let g = tape.backward_with(out, upstream.clone())?;
        Ok(vars.iter().map(|&v| g.get_or_zeros(v, &tape)).collect())
    }
}
