//! Gated 1-D convolution for sequences of shape `[b, c, L]`.
//!
//! Channels are split into `heads` groups that share one kernel and one gate.
//! Each head's context is its `[c/heads, L]` block pooled to `[1, 3k]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::default_latent;
use super::params::he_normal;
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, Mode, NormAxes, PoolKind, DEFAULT_EPS};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub channels: usize,
    pub heads: usize,
    /// Odd kernel length; padding is `kernel / 2` on both sides.
    pub kernel: usize,
    pub latent: usize,
}

impl SeqConfig {
    pub fn new(channels: usize, heads: usize, kernel: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("channels {channels} not divisible by heads {heads}")));
        }
        if kernel < 3 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("sequence kernel must be odd and > 1, got {kernel}")));
        }
        Ok(Self { channels, heads, kernel, latent: default_latent(kernel) })
    }

    pub fn pooled_len(&self) -> usize {
        3 * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqSlots<P> {
    /// Per-head kernel `[heads, k]`.
    pub weight: P,
    /// `[3k, d]`
    pub encoder: P,
    /// `[d, k]`
    pub decoder: P,
    /// Layer normalization over the latent axis.
    pub norm: [P; 2],
}

pub type SeqParams<T> = SeqSlots<Tensor<T>>;
pub type SeqVars = SeqSlots<Var>;

impl<T: Scalar> SeqParams<T> {
    /// Fan-in scaled kernel, encoder and decoder; zero normalization so the
    /// gate starts at exactly one half.
    pub fn init<R: Rng + ?Sized>(cfg: &SeqConfig, rng: &mut R) -> Self {
        let d = cfg.latent;
        Self {
            weight: he_normal(&[cfg.heads, cfg.kernel], cfg.kernel, rng),
            encoder: he_normal(&[cfg.pooled_len(), d], cfg.pooled_len(), rng),
            decoder: he_normal(&[d, cfg.kernel], d, rng),
            norm: [Tensor::zeros(&[d]), Tensor::zeros(&[d])],
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<SeqVars> {
        Ok(SeqSlots {
            weight: tape.leaf(self.weight.clone())?,
            encoder: tape.leaf(self.encoder.clone())?,
            decoder: tape.leaf(self.decoder.clone())?,
            norm: [tape.leaf(self.norm[0].clone())?, tape.leaf(self.norm[1].clone())?],
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("weight", &self.weight),
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("norm.gamma", &self.norm[0]),
            ("norm.beta", &self.norm[1]),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SeqTrace {
    /// `[b, heads, k]`
    pub gate: Var,
    /// `[b, c, L]`
    pub out: Var,
}

pub fn cgc_seq_forward<T: Scalar>(tape: &mut Tape<T>, cfg: &SeqConfig, vars: &SeqVars, s: Var, eps: T) -> Result<SeqTrace> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 3 || shape[1] != cfg.channels {
        return Err(Error::Shape {
            op: "cgc_seq_forward",
            axis: "input".into(),
            detail: format!("expected [b, {}, L], got {shape:?}", cfg.channels),
        });
    }
    let (b, c, len) = (shape[0], shape[1], shape[2]);
    let (h, k, m) = (cfg.heads, cfg.kernel, cfg.pooled_len());
    let padded = if len < m { tape.pad_last(s, m)? } else { s };
    let plen = len.max(m);
    let view = tape.reshape(padded, &[b, h, c / h, plen])?;
    let pooled = tape.adaptive_pool(view, &[1, m], PoolKind::Avg)?;
    let flat = tape.reshape(pooled, &[b, h, m])?;
    let enc = tape.grouped_linear(flat, vars.encoder, 1)?;
    let normed = tape.norm(enc, vars.norm[0], vars.norm[1], NormAxes::Trailing, Mode::Train, None, eps)?;
    let act = tape.relu(normed)?;
    let logits = tape.grouped_linear(act, vars.decoder, 1)?;
    let gate = tape.sigmoid(logits)?;
    let w = tape.reshape(vars.weight, &[1, h, k])?;
    let gated = tape.mul(gate, w)?;
    let per_head = tape.reshape(gated, &[b, h, 1, k])?;
    let per_chan = tape.broadcast_to(per_head, &[b, h, c / h, k])?;
    let kernels = tape.reshape(per_chan, &[b * c, 1, k])?;
    let xg = tape.reshape(s, &[1, b * c, len])?;
    let y = tape.conv(xg, kernels, &ConvSpec::new(&[1], &[k / 2], b * c))?;
    let out = tape.reshape(y, &[b, c, len])?;
    Ok(SeqTrace { gate, out })
}

/// Gated sequence convolution with owned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqCgcLayer<T> {
    pub config: SeqConfig,
    pub params: SeqParams<T>,
    pub eps: T,
}

impl<T: Scalar> SeqCgcLayer<T> {
    pub fn new<R: Rng + ?Sized>(config: SeqConfig, rng: &mut R) -> Self {
        let params = SeqParams::init(&config, rng);
        Self { config, params, eps: T::lit(DEFAULT_EPS) }
    }

    /// Returns `(output, gate)`.
    pub fn forward(&self, s: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        tape.set_scope("cgc_seq");
        let vars = self.params.bind(&mut tape)?;
        let sv = tape.leaf(s.clone())?;
        let tr = cgc_seq_forward(&mut tape, &self.config, &vars, sv, self.eps)?;
        Ok((tape.value(tr.out).clone(), tape.value(tr.gate).clone()))
    }

    /// Depthwise convolution with the ungated per-head kernels.
    pub fn plain_forward(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, k) = (self.config.channels, self.config.heads, self.config.kernel);
        let w = Tensor::from_fn(&[c, 1, k], |i| self.params.weight.data()[(i / k) / (c / h) * k + i % k]);
        crate::ops::conv_nd(s, &w, &ConvSpec::new(&[1], &[k / 2], c))
    }
}
