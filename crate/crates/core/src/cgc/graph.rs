//! Tape programs for the gate generator and the per-sample convolution.

use super::config::{CgcConfig, Combine};
use super::params::{CgcRunning, CgcVars};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, Mode, NormAxes, RunningStats};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Everything a gated convolution needs besides its input.
pub struct GateEnv<'a, T> {
    pub cfg: &'a CgcConfig,
    pub vars: &'a CgcVars,
    pub running: &'a mut CgcRunning<T>,
    pub mode: Mode,
    pub eps: T,
}

/// Per-channel latent context `[b, c, d]` for each branch. A branch is `None`
/// when the configuration does not use it.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub decode: Option<Var>,
    pub interact: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct CgcTrace {
    pub context: Context,
    /// `[b, o, d]`, present when channels interact.
    pub interacted: Option<Var>,
    /// `[b, o, c, k..]`
    pub gate: Var,
    /// Gated kernels `[b, o, c, k..]`.
    pub kernels: Var,
    /// `[b, o, out..]`
    pub out: Var,
}

fn norm_relu<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: [Var; 2],
    mode: Mode,
    running: Option<&mut RunningStats<T>>,
    eps: T,
) -> Result<Var> {
    let y = tape.norm(x, p[0], p[1], NormAxes::Channel(1), mode, running, eps)?;
    tape.relu(y)
}

fn missing(what: &str) -> Error {
    Error::Config(format!("gate parameter `{what}` missing for this configuration"))
}

fn expect_input(op: &str, cfg: &CgcConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != cfg.kernel.len() + 2 || shape[1] != cfg.in_channels {
        return Err(Error::Shape {
            op: "cgc",
            axis: "input".into(),
            detail: format!(
                "{op}: expected [b, {}, {} spatial axes], got {shape:?}",
                cfg.in_channels,
                cfg.kernel.len()
            ),
        });
    }
    Ok(())
}

/// Pools `x` to the configured size, flattens each channel and projects it
/// with the shared encoder, then normalizes each branch.
pub fn encode_context<T: Scalar>(tape: &mut Tape<T>, env: &mut GateEnv<'_, T>, x: Var) -> Result<Context> {
    let cfg = env.cfg;
    expect_input("encode_context", cfg, tape.shape(x))?;
    let (b, c) = (tape.shape(x)[0], cfg.in_channels);
    let pooled = tape.adaptive_pool(x, &cfg.pooled, cfg.pool)?;
    let flat = tape.reshape(pooled, &[b, c, cfg.pooled_area()])?;
    let enc = tape.grouped_linear(flat, env.vars.encoder, 1)?;
    let decode = match env.vars.norm_c1 {
        Some(p) if cfg.uses_g1() => Some(norm_relu(tape, enc, p, env.mode, env.running.norm_c1.as_mut(), env.eps)?),
        _ => None,
    };
    let interact = if cfg.uses_g2() {
        let enc_i = match env.vars.encoder2 {
            Some(e2) => tape.grouped_linear(flat, e2, 1)?,
            None => enc,
        };
        Some(match (env.vars.norm_c2, decode) {
            (Some(p), _) => norm_relu(tape, enc_i, p, env.mode, env.running.norm_c2.as_mut(), env.eps)?,
            (None, Some(d)) if enc_i == enc => d,
            (None, _) => {
                let p = env.vars.norm_c1.ok_or_else(|| missing("norm_c1"))?;
                norm_relu(tape, enc_i, p, env.mode, env.running.norm_c1.as_mut(), env.eps)?
            }
        })
    } else {
        None
    };
    Ok(Context { decode, interact })
}

/// Grouped linear map across channels: `[b, c, d] -> [b, o, d]`, followed by
/// the output normalization and ReLU.
pub fn interact_channels<T: Scalar>(tape: &mut Tape<T>, env: &mut GateEnv<'_, T>, ctx: Var) -> Result<Var> {
    let cfg = env.cfg;
    if !cfg.channel_interacting() {
        return Err(Error::Config("channel interaction is disabled for this configuration".into()));
    }
    let i = env.vars.interact.ok_or_else(|| missing("interact"))?;
    let p = env.vars.norm_o.ok_or_else(|| missing("norm_o"))?;
    let t = tape.transpose_last2(ctx)?;
    let y = tape.grouped_linear(t, i, cfg.groups)?;
    let y = tape.transpose_last2(y)?;
    norm_relu(tape, y, p, env.mode, env.running.norm_o.as_mut(), env.eps)
}

/// Decodes the two gate components and combines them into `[b, o, c, k..]`.
pub fn decode_gate<T: Scalar>(
    tape: &mut Tape<T>,
    env: &GateEnv<'_, T>,
    decode: Option<Var>,
    interacted: Option<Var>,
) -> Result<Var> {
    let cfg = env.cfg;
    let (c, o, kk) = (cfg.in_channels, cfg.out_channels, cfg.kernel_area());
    let mut g1 = None;
    if cfg.uses_g1() {
        let ctx = decode.ok_or_else(|| missing("decode context"))?;
        let b = tape.shape(ctx)[0];
        let y = tape.grouped_linear(ctx, env.vars.decoder_c.ok_or_else(|| missing("decoder_c"))?, 1)?;
        g1 = Some((b, tape.reshape(y, &[b, 1, c, kk])?));
    }
    let mut g2 = None;
    if cfg.uses_g2() {
        let ctx = interacted.ok_or_else(|| missing("interacted context"))?;
        let b = tape.shape(ctx)[0];
        let dec = env.vars.decoder_o.or(env.vars.decoder_c).ok_or_else(|| missing("decoder_o"))?;
        let y = tape.grouped_linear(ctx, dec, 1)?;
        g2 = Some((b, tape.reshape(y, &[b, o, 1, kk])?));
    }
    let (b, gate) = match (cfg.combine, g1, g2) {
        (Combine::SumSigmoid, Some((b, a)), Some((_, z))) => {
            let s = tape.add(a, z)?;
            (b, tape.sigmoid(s)?)
        }
        (Combine::Product, Some((b, a)), Some((_, z))) => {
            let sa = tape.sigmoid(a)?;
            let sz = tape.sigmoid(z)?;
            (b, tape.mul(sa, sz)?)
        }
        (Combine::OnlyG1, Some((b, a)), _) | (Combine::OnlyG2, _, Some((b, a))) => {
            let s = tape.sigmoid(a)?;
            (b, tape.broadcast_to(s, &[b, o, c, kk])?)
        }
        _ => return Err(missing("gate component")),
    };
    let mut shape = vec![b, o, c];
    shape.extend_from_slice(&cfg.kernel);
    tape.reshape(gate, &shape)
}

/// Element-wise product of the shared kernel `[o, c, k..]` with per-sample
/// gates `[b, o, c, k..]`.
pub fn modulate_kernel<T: Scalar>(tape: &mut Tape<T>, weight: Var, gate: Var) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    let gs = tape.shape(gate);
    if gs.len() != ws.len() + 1 || gs[1..] != ws[..] {
        return Err(Error::Shape {
            op: "modulate_kernel",
            axis: "kernel".into(),
            detail: format!("gate {gs:?} does not match weight {ws:?}"),
        });
    }
    let mut one = vec![1];
    one.extend_from_slice(&ws);
    let w = tape.reshape(weight, &one)?;
    tape.mul(gate, w)
}

/// Full forward pass: context, gate, gated kernels, and one convolution per
/// sample, evaluated as a single grouped convolution over the batch.
pub fn cgc_forward<T: Scalar>(tape: &mut Tape<T>, env: &mut GateEnv<'_, T>, x: Var) -> Result<CgcTrace> {
    let cfg = env.cfg;
    expect_input("cgc_forward", cfg, tape.shape(x))?;
    let xs = tape.shape(x).to_vec();
    let (b, c, o) = (xs[0], cfg.in_channels, cfg.out_channels);
    let context = encode_context(tape, env, x)?;
    let interacted = match context.interact {
        Some(ci) => Some(interact_channels(tape, env, ci)?),
        None => None,
    };
    let gate = decode_gate(tape, env, context.decode, interacted)?;
    let kernels = modulate_kernel(tape, env.vars.weight, gate)?;
    let mut xshape = vec![1, b * c];
    xshape.extend_from_slice(&xs[2..]);
    let xg = tape.reshape(x, &xshape)?;
    let mut kshape = vec![b * o, c];
    kshape.extend_from_slice(&cfg.kernel);
    let kg = tape.reshape(kernels, &kshape)?;
    let y = tape.conv(xg, kg, &ConvSpec::new(&cfg.stride, &cfg.padding, b))?;
    let mut yshape = vec![b, o];
    yshape.extend_from_slice(&tape.shape(y)[2..]);
    let out = tape.reshape(y, &yshape)?;
    Ok(CgcTrace { context, interacted, gate, kernels, out })
}

/// The same convolution with the ungated kernel.
pub fn plain_conv<T: Scalar>(tape: &mut Tape<T>, cfg: &CgcConfig, x: Var, weight: Var) -> Result<Var> {
    tape.conv(x, weight, &ConvSpec::new(&cfg.stride, &cfg.padding, 1))
}
