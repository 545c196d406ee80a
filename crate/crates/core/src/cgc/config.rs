use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::PoolKind;

/// How the input-channel and output-channel gate components are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `sigmoid(G1[i] + G2[h])`
    #[default]
    SumSigmoid,
    /// `sigmoid(G1[i])`, shared by every output channel.
    OnlyG1,
    /// `sigmoid(G2[h])`, shared by every input channel.
    OnlyG2,
    /// `sigmoid(G1[i]) * sigmoid(G2[h])`
    Product,
}

fn one() -> usize {
    1
}

/// Gate-generator switches, independent of the convolution they wrap.
///
/// Unset fields fall back to the defaults: `d = max(1, floor(k1*k2/2))`,
/// `g = c/16` when 16 divides both `c` and `o` (otherwise 1), pooled size
/// equal to the kernel size, average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateOptions {
    pub latent: Option<usize>,
    /// `d = k1*k2` (no bottleneck).
    pub full_latent: bool,
    pub groups: Option<usize>,
    /// Pooled extent as a multiple of the kernel extent.
    #[serde(default = "one")]
    pub pooled_scale: usize,
    pub pool: PoolKind,
    pub combine: Combine,
    pub shared_norm: bool,
    pub shared_decoder: bool,
    pub two_encoders: bool,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self {
            latent: None,
            full_latent: false,
            groups: None,
            pooled_scale: 1,
            pool: PoolKind::Avg,
            combine: Combine::SumSigmoid,
            shared_norm: false,
            shared_decoder: false,
            two_encoders: false,
        }
    }
}

impl GateOptions {
    /// Ablation variant names accepted by [`GateOptions::variant`].
    pub const VARIANTS: [&'static str; 11] = [
        "default",
        "only-g1",
        "only-g2",
        "product",
        "g1-full",
        "d-full",
        "shared-norm",
        "two-e",
        "shared-d",
        "pool-2x",
        "maxpool",
    ];

    pub fn variant(name: &str) -> Result<Self> {
        let mut o = Self::default();
        match name {
            "default" => {}
            "only-g1" => o.combine = Combine::OnlyG1,
            "only-g2" => o.combine = Combine::OnlyG2,
            "product" => o.combine = Combine::Product,
            "g1-full" => o.groups = Some(1),
            "d-full" => o.full_latent = true,
            "shared-norm" => o.shared_norm = true,
            "two-e" => o.two_encoders = true,
            "shared-d" => o.shared_decoder = true,
            "pool-2x" => o.pooled_scale = 2,
            "maxpool" => o.pool = PoolKind::Max,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (expected one of {})",
                    Self::VARIANTS.join(", ")
                )))
            }
        }
        Ok(o)
    }
}

/// Interaction group count: `c/16` when 16 divides both channel counts,
/// otherwise a single dense group (e.g. a 3-channel first layer).
pub fn interact_groups(c: usize, o: usize) -> usize {
    if c.is_multiple_of(16) && o.is_multiple_of(16) {
        c / 16
    } else {
        1
    }
}

/// Default latent width `max(1, floor(k1*k2/2))`.
pub fn default_latent(kernel_area: usize) -> usize {
    (kernel_area / 2).max(1)
}

/// Fully resolved configuration of one context-gated convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CgcConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub latent: usize,
    pub groups: usize,
    pub pooled: Vec<usize>,
    pub pool: PoolKind,
    pub combine: Combine,
    pub shared_norm: bool,
    pub shared_decoder: bool,
    pub two_encoders: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Conv1d,
    Conv2d,
}

/// Extra parameters of the gate path, by module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateParamCounts {
    pub encode: usize,
    pub interact: usize,
    pub decode: usize,
    pub norm: usize,
}

impl GateParamCounts {
    pub fn total(&self) -> usize {
        self.encode + self.interact + self.decode + self.norm
    }
}

impl CgcConfig {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        stride: &[usize],
        padding: &[usize],
        opts: &GateOptions,
    ) -> Result<Self> {
        if kernel.is_empty() || kernel.len() > 2 {
            return Err(Error::Config(format!("kernel {kernel:?}: need 1 or 2 spatial axes")));
        }
        if stride.len() != kernel.len() || padding.len() != kernel.len() {
            return Err(Error::Config(format!(
                "stride {stride:?} / padding {padding:?} do not match kernel {kernel:?}"
            )));
        }
        if in_channels == 0 || out_channels == 0 || kernel.iter().chain(stride).any(|&v| v == 0) {
            return Err(Error::Config("channel, kernel and stride extents must be positive".into()));
        }
        let area: usize = kernel.iter().product();
        if area <= 1 {
            return Err(Error::Config(
                "context gating applies only to kernels with spatial size > 1; use a plain convolution for 1x1 kernels".into(),
            ));
        }
        let latent = match (opts.latent, opts.full_latent) {
            (Some(d), _) => d,
            (None, true) => area,
            (None, false) => default_latent(area),
        };
        if latent == 0 {
            return Err(Error::Config("latent width d must be at least 1".into()));
        }
        let groups = opts.groups.unwrap_or_else(|| interact_groups(in_channels, out_channels));
        let cfg = Self {
            in_channels,
            out_channels,
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            padding: padding.to_vec(),
            latent,
            groups,
            pooled: kernel.iter().map(|&k| k * opts.pooled_scale).collect(),
            pool: opts.pool,
            combine: opts.combine,
            shared_norm: opts.shared_norm,
            shared_decoder: opts.shared_decoder,
            two_encoders: opts.two_encoders,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Square-kernel 2-D layer with "same" padding and default options.
    pub fn conv2d(in_channels: usize, out_channels: usize, k: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, &[k, k], &[1, 1], &[k / 2, k / 2], &GateOptions::default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooled.len() != self.kernel.len() || self.pooled.contains(&0) {
            return Err(Error::Config(format!("pooled extents {:?} invalid", self.pooled)));
        }
        if self.channel_interacting() {
            let g = self.groups;
            if g == 0 || !self.in_channels.is_multiple_of(g) || !self.out_channels.is_multiple_of(g) {
                return Err(Error::Config(format!(
                    "channels c={} and o={} must be divisible by g={g}",
                    self.in_channels, self.out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        if self.kernel.len() == 1 {
            Variant::Conv1d
        } else {
            Variant::Conv2d
        }
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn pooled_area(&self) -> usize {
        self.pooled.iter().product()
    }

    pub fn uses_g1(&self) -> bool {
        self.combine != Combine::OnlyG2
    }

    pub fn uses_g2(&self) -> bool {
        self.combine != Combine::OnlyG1
    }

    pub fn channel_interacting(&self) -> bool {
        self.uses_g2()
    }

    /// Whether a separate encoder feeds the interaction branch.
    pub fn has_second_encoder(&self) -> bool {
        self.two_encoders && self.uses_g2()
    }

    pub fn has_decoder_o(&self) -> bool {
        self.uses_g2() && !(self.shared_decoder && self.uses_g1())
    }

    pub fn has_norm_c2(&self) -> bool {
        self.uses_g2() && !(self.shared_norm && self.uses_g1())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn interact_shape(&self) -> [usize; 2] {
        [self.in_channels / self.groups, self.out_channels / self.groups]
    }

    pub fn gate_params(&self) -> GateParamCounts {
        let (c, o, d) = (self.in_channels, self.out_channels, self.latent);
        let kk = self.kernel_area();
        let enc = self.pooled_area() * d;
        let [ig, og] = self.interact_shape();
        GateParamCounts {
            encode: enc * if self.has_second_encoder() { 2 } else { 1 },
            interact: if self.uses_g2() { ig * og } else { 0 },
            decode: d * kk * (usize::from(self.uses_g1()) + usize::from(self.has_decoder_o())),
            norm: 2 * (if self.uses_g1() { c } else { 0 }
                + if self.has_norm_c2() { c } else { 0 }
                + if self.uses_g2() { o } else { 0 }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_rules() {
        let cfg = CgcConfig::conv2d(64, 64, 3).unwrap();
        assert_eq!((cfg.latent, cfg.groups, cfg.pooled.clone()), (4, 4, vec![3, 3]));
        assert_eq!(cfg.interact_shape(), [16, 16]);
        let first = CgcConfig::new(3, 64, &[7, 7], &[2, 2], &[3, 3], &GateOptions::default()).unwrap();
        assert_eq!((first.latent, first.groups), (24, 1));
        assert_eq!(first.interact_shape(), [3, 64]);
        let mid = CgcConfig::conv2d(16, 32, 3).unwrap();
        assert_eq!((mid.groups, mid.interact_shape()), (1, [16, 32]));
    }

    #[test]
    fn one_by_one_rejected() {
        let err = CgcConfig::conv2d(16, 16, 1).unwrap_err().to_string();
        assert!(err.contains("plain convolution"), "{err}");
    }

    #[test]
    fn indivisible_groups_rejected() {
        let opts = GateOptions { groups: Some(3), ..Default::default() };
        assert!(CgcConfig::new(16, 16, &[3, 3], &[1, 1], &[1, 1], &opts).is_err());
        let only_g1 = GateOptions { groups: Some(3), combine: Combine::OnlyG1, ..Default::default() };
        assert!(CgcConfig::new(16, 16, &[3, 3], &[1, 1], &[1, 1], &only_g1).is_ok());
    }

    #[test]
    fn every_variant_parses() {
        for v in GateOptions::VARIANTS {
            let o = GateOptions::variant(v).unwrap();
            CgcConfig::new(32, 32, &[3, 3], &[1, 1], &[1, 1], &o).unwrap();
        }
        assert!(GateOptions::variant("bogus").is_err());
    }

    #[test]
    fn odd_kernel_area_rounds_down() {
        assert_eq!(default_latent(9), 4);
        assert_eq!(default_latent(49), 24);
        assert_eq!(default_latent(3), 1);
        assert_eq!(default_latent(2), 1);
    }
}
