//! SGD with momentum and the learning-rate schedule.

use super::model::{Param, ParamTag};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for [`ParamTag::GateExtra`] parameters.
    pub gate_lr_mult: f64,
    /// Leave gate-path parameters untouched.
    pub freeze_gates: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4, gate_lr_mult: 0.1, freeze_gates: false }
    }
}

/// Momentum buffers, one per parameter, created on first use.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T> {
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        Self { buffers: Vec::new() }
    }
}

/// `m <- mu*m + (g + wd*p)`, `p <- p - lr_eff*m`.
pub fn sgd_step<T: Scalar>(params: &mut [Param<T>], grads: &[Tensor<T>], lr: f64, cfg: &SgdConfig, state: &mut SgdState<T>) -> Result<()> {
    if grads.len() != params.len() {
        return Err(shape_err("sgd_step", "parameter list", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    state.buffers.resize(params.len(), None);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        if g.shape() != p.value.shape() {
            return Err(shape_err("sgd_step", p.name.clone(), format!("gradient {:?} vs parameter {:?}", g.shape(), p.value.shape())));
        }
        let lr_eff = match p.tag {
            ParamTag::GateExtra if cfg.freeze_gates => continue,
            ParamTag::GateExtra => lr * cfg.gate_lr_mult,
            ParamTag::Plain => lr,
        };
        let lr_eff = T::lit(lr_eff);
        let m = buf.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((mv, &gv), pv) in m.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut().iter_mut()) {
            *mv = mu * *mv + (gv + wd * *pv);
            *pv -= lr_eff * *mv;
        }
    }
    Ok(())
}

/// Base rate times every factor whose (1-based) milestone epoch has been
/// reached.
pub fn lr_for_epoch(base: f64, schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule.iter().filter(|(e, _)| epoch >= *e).fold(base, |lr, (_, f)| lr * f)
}
