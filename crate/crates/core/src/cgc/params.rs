use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::CgcConfig;
use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Storage slots of one gated convolution. Optional slots are present only
/// for the configurations that use them; see [`CgcSlots::build`].
#[derive(Clone, Debug, PartialEq)]
pub struct CgcSlots<P> {
    /// Convolution kernel `[o, c, k..]`.
    pub weight: P,
    /// Context encoder `[h'*w', d]`, shared across channels.
    pub encoder: P,
    /// Separate encoder for the interaction branch.
    pub encoder2: Option<P>,
    /// Grouped channel interaction `[c/g, o/g]`.
    pub interact: Option<P>,
    /// Decoder for the input-channel component `[d, k1*k2]`.
    pub decoder_c: Option<P>,
    /// Decoder for the output-channel component `[d, k1*k2]`.
    pub decoder_o: Option<P>,
    /// `[gamma, beta]` of each gate normalization.
    pub norm_c1: Option<[P; 2]>,
    pub norm_c2: Option<[P; 2]>,
    pub norm_o: Option<[P; 2]>,
}

/// Parameter tensors of a gated convolution.
pub type CgcParams<T> = CgcSlots<Tensor<T>>;

/// Parameters recorded on a tape.
pub type CgcVars = CgcSlots<Var>;

fn opt_pair<P>(name: &'static str, present: bool, mut f: impl FnMut(&'static str) -> Result<P>) -> Result<Option<[P; 2]>> {
    if !present {
        return Ok(None);
    }
    let (g, b) = match name {
        "norm_c1" => ("norm_c1.gamma", "norm_c1.beta"),
        "norm_c2" => ("norm_c2.gamma", "norm_c2.beta"),
        _ => ("norm_o.gamma", "norm_o.beta"),
    };
    Ok(Some([f(g)?, f(b)?]))
}

impl<P> CgcSlots<P> {
    /// Fills the slots used by `cfg`, in [`CgcSlots::named`] order. `f` gets
    /// the slot name and its shape.
    pub fn build(cfg: &CgcConfig, mut f: impl FnMut(&'static str, Vec<usize>) -> Result<P>) -> Result<Self> {
        let (c, o, d) = (cfg.in_channels, cfg.out_channels, cfg.latent);
        let kk = cfg.kernel_area();
        let weight = f("weight", cfg.weight_shape())?;
        let encoder = f("encoder", vec![cfg.pooled_area(), d])?;
        let encoder2 = if cfg.has_second_encoder() { Some(f("encoder2", vec![cfg.pooled_area(), d])?) } else { None };
        let interact = if cfg.uses_g2() { Some(f("interact", cfg.interact_shape().to_vec())?) } else { None };
        let decoder_c = if cfg.uses_g1() { Some(f("decoder_c", vec![d, kk])?) } else { None };
        let decoder_o = if cfg.has_decoder_o() { Some(f("decoder_o", vec![d, kk])?) } else { None };
        let norm_c1 = opt_pair("norm_c1", cfg.uses_g1(), |n| f(n, vec![c]))?;
        let norm_c2 = opt_pair("norm_c2", cfg.has_norm_c2(), |n| f(n, vec![c]))?;
        let norm_o = opt_pair("norm_o", cfg.uses_g2(), |n| f(n, vec![o]))?;
        Ok(Self { weight, encoder, encoder2, interact, decoder_c, decoder_o, norm_c1, norm_c2, norm_o })
    }

    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let mut v = vec![("weight", &self.weight), ("encoder", &self.encoder)];
        let singles = [
            ("encoder2", &self.encoder2),
            ("interact", &self.interact),
            ("decoder_c", &self.decoder_c),
            ("decoder_o", &self.decoder_o),
        ];
        v.extend(singles.into_iter().filter_map(|(n, p)| p.as_ref().map(|p| (n, p))));
        let pairs = [
            ("norm_c1.gamma", "norm_c1.beta", &self.norm_c1),
            ("norm_c2.gamma", "norm_c2.beta", &self.norm_c2),
            ("norm_o.gamma", "norm_o.beta", &self.norm_o),
        ];
        for (g, b, p) in pairs {
            if let Some([pg, pb]) = p {
                v.push((g, pg));
                v.push((b, pb));
            }
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        let mut v = vec![("weight", &mut self.weight), ("encoder", &mut self.encoder)];
        let singles = [
            ("encoder2", &mut self.encoder2),
            ("interact", &mut self.interact),
            ("decoder_c", &mut self.decoder_c),
            ("decoder_o", &mut self.decoder_o),
        ];
        v.extend(singles.into_iter().filter_map(|(n, p)| p.as_mut().map(|p| (n, p))));
        let pairs = [
            ("norm_c1.gamma", "norm_c1.beta", &mut self.norm_c1),
            ("norm_c2.gamma", "norm_c2.beta", &mut self.norm_c2),
            ("norm_o.gamma", "norm_o.beta", &mut self.norm_o),
        ];
        for (g, b, p) in pairs {
            if let Some([pg, pb]) = p {
                v.push((g, pg));
                v.push((b, pb));
            }
        }
        v
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Result<Q>) -> Result<CgcSlots<Q>> {
        type F<'a, P, Q> = dyn FnMut(&'static str, &P) -> Result<Q> + 'a;
        fn one<P, Q>(f: &mut F<'_, P, Q>, n: &'static str, p: &Option<P>) -> Result<Option<Q>> {
            p.as_ref().map(|p| f(n, p)).transpose()
        }
        fn two<P, Q>(f: &mut F<'_, P, Q>, n: [&'static str; 2], p: &Option<[P; 2]>) -> Result<Option<[Q; 2]>> {
            p.as_ref().map(|[g, b]| Ok([f(n[0], g)?, f(n[1], b)?])).transpose()
        }
        let f: &mut F<'_, P, Q> = &mut f;
        Ok(CgcSlots {
            weight: f("weight", &self.weight)?,
            encoder: f("encoder", &self.encoder)?,
            encoder2: one(f, "encoder2", &self.encoder2)?,
            interact: one(f, "interact", &self.interact)?,
            decoder_c: one(f, "decoder_c", &self.decoder_c)?,
            decoder_o: one(f, "decoder_o", &self.decoder_o)?,
            norm_c1: two(f, ["norm_c1.gamma", "norm_c1.beta"], &self.norm_c1)?,
            norm_c2: two(f, ["norm_c2.gamma", "norm_c2.beta"], &self.norm_c2)?,
            norm_o: two(f, ["norm_o.gamma", "norm_o.beta"], &self.norm_o)?,
        })
    }

    /// Slots other than the convolution kernel.
    pub fn gate_named(&self) -> Vec<(&'static str, &P)> {
        self.named().into_iter().filter(|(n, _)| *n != "weight").collect()
    }
}

impl<T: Scalar> CgcParams<T> {
    /// Fan-in scaled normal initialization (`std = sqrt(2 / fan_in)`) for the
    /// kernel, encoder, interaction and decoders. The normalizations feeding
    /// the decoders (`norm_c1`, `norm_o`) start with zero scale and shift so
    /// every gate is exactly `sigmoid(0)` at step 0; `norm_c2` starts as the
    /// identity affine map.
    pub fn init<R: Rng + ?Sized>(cfg: &CgcConfig, rng: &mut R) -> Self {
        let [ig, _] = cfg.interact_shape();
        let fan_in = |name: &str| -> usize {
            match name {
                "weight" => cfg.in_channels * cfg.kernel_area(),
                "encoder" | "encoder2" => cfg.pooled_area(),
                "interact" => ig,
                _ => cfg.latent,
            }
        };
        let built: Result<Self> = Self::build(cfg, |name, shape| {
            Ok(match name {
                "norm_c2.gamma" => Tensor::ones(&shape),
                n if n.starts_with("norm_") => Tensor::zeros(&shape),
                n => he_normal(&shape, fan_in(n), rng),
            })
        });
        built.expect("shapes derived from a validated config")
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<CgcVars> {
        self.try_map(|_, t| tape.leaf(t.clone()))
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_lookup(cfg: &CgcConfig, mut get: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        Self::build(cfg, |name, shape| {
            let t = get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        })
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn num_gate_params(&self) -> usize {
        self.gate_named().iter().map(|(_, t)| t.len()).sum()
    }
}

impl CgcVars {
    /// Takes `vars` in [`CgcSlots::named`] order.
    pub fn from_slice(cfg: &CgcConfig, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let s = Self::build(cfg, |name, _| it.next().ok_or_else(|| Error::Config(format!("missing variable for `{name}`"))))?;
        if it.next().is_some() {
            return Err(Error::Config("too many variables for this configuration".into()));
        }
        Ok(s)
    }
}

pub(crate) fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Running statistics of the gate normalizations (used in eval mode).
#[derive(Clone, Debug, PartialEq)]
pub struct CgcRunning<T> {
    pub norm_c1: Option<RunningStats<T>>,
    pub norm_c2: Option<RunningStats<T>>,
    pub norm_o: Option<RunningStats<T>>,
}

impl<T: Scalar> CgcRunning<T> {
    pub fn identity(cfg: &CgcConfig) -> Self {
        let mk = |on: bool, n: usize| on.then(|| RunningStats::identity(n));
        Self {
            norm_c1: mk(cfg.uses_g1(), cfg.in_channels),
            norm_c2: mk(cfg.has_norm_c2(), cfg.in_channels),
            norm_o: mk(cfg.uses_g2(), cfg.out_channels),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &RunningStats<T>)> {
        [("norm_c1", &self.norm_c1), ("norm_c2", &self.norm_c2), ("norm_o", &self.norm_o)]
            .into_iter()
            .filter_map(|(n, r)| r.as_ref().map(|r| (n, r)))
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut RunningStats<T>)> {
        [("norm_c1", &mut self.norm_c1), ("norm_c2", &mut self.norm_c2), ("norm_o", &mut self.norm_o)]
            .into_iter()
            .filter_map(|(n, r)| r.as_mut().map(|r| (n, r)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgc::config::GateOptions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slot_order_and_counts_match_config() {
        for v in GateOptions::VARIANTS {
            let cfg = CgcConfig::new(32, 64, &[3, 3], &[1, 1], &[1, 1], &GateOptions::variant(v).unwrap()).unwrap();
            let p: CgcParams<f64> = CgcParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(p.num_gate_params(), cfg.gate_params().total(), "{v}");
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape).unwrap();
            let names: Vec<_> = p.named().iter().map(|(n, _)| *n).collect();
            let vnames: Vec<_> = vars.named().iter().map(|(n, _)| *n).collect();
            assert_eq!(names, vnames);
            let flat: Vec<Var> = vars.named().iter().map(|(_, v)| **v).collect();
            assert_eq!(CgcVars::from_slice(&cfg, &flat).unwrap(), vars);
        }
    }

    #[test]
    fn gate_norms_start_at_zero() {
        let cfg = CgcConfig::conv2d(16, 16, 3).unwrap();
        let p: CgcParams<f32> = CgcParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        for [g, b] in [p.norm_c1.as_ref().unwrap(), p.norm_o.as_ref().unwrap()] {
            assert!(g.data().iter().chain(b.data()).all(|&v| v == 0.0));
        }
        assert!(p.norm_c2.as_ref().unwrap()[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn lookup_rejects_wrong_shape() {
        let cfg = CgcConfig::conv2d(16, 16, 3).unwrap();
        let err = CgcParams::<f64>::from_lookup(&cfg, |_| Ok(Tensor::zeros(&[2]))).unwrap_err();
        assert!(err.to_string().contains("weight"));
    }
}
