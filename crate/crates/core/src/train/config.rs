//! Training configuration as `key = value` lines.

use std::path::{Path, PathBuf};

use super::data::SynthMode;
use super::optim::SgdConfig;
use crate::arch::{ArchDescriptor, Network};
use crate::cgc::GateOptions;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Architecture descriptor (JSON).
    pub arch: PathBuf,
    /// Gate variant applied to every spatial convolution of `arch`, if any.
    pub gate: Option<String>,
    pub data: DataSource,
    pub synth_mode: SynthMode,
    pub synth_classes: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_size: usize,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, factor)` milestones.
    pub lr_schedule: Vec<(usize, f64)>,
    pub cgc_lr_mult: f64,
    pub seed: u64,
    pub augment: bool,
    /// Keep every gate-path parameter at its initial value.
    pub freeze_gates: bool,
}

impl Default for TrainConfig {
    /// CIFAR-10 recipe: 164 epochs, batch 128, lr 0.1 divided by 10 at
    /// epochs 81 and 122, momentum 0.9, weight decay 1e-4.
    fn default() -> Self {
        Self {
            arch: PathBuf::from("archs/resnet110.json"),
            gate: None,
            data: DataSource::Cifar10,
            synth_mode: SynthMode::ContextSeparable,
            synth_classes: 4,
            synth_train: 512,
            synth_test: 128,
            synth_size: 16,
            data_seed: 0,
            epochs: 164,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: vec![(81, 0.1), (122, 0.1)],
            cgc_lr_mult: 0.1,
            seed: 0,
            augment: true,
            freeze_gates: false,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

pub fn parse_schedule(v: &str) -> Result<Vec<(usize, f64)>> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (e, f) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("lr_schedule entry `{item}` is not EPOCH:FACTOR")))?;
            Ok((parse("lr_schedule", e.trim())?, parse("lr_schedule", f.trim())?))
        })
        .collect()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "arch" => self.arch = PathBuf::from(v),
            "gate" => {
                self.gate = match v {
                    "none" => None,
                    name => {
                        GateOptions::variant(name)?;
                        Some(name.to_string())
                    }
                }
            }
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar10" => DataSource::Cifar10,
                    _ => return Err(Error::Config(format!("`data`: expected synthetic or cifar10, got `{v}`"))),
                }
            }
            "synth_mode" => self.synth_mode = v.parse()?,
            "synth_classes" => self.synth_classes = parse(key, v)?,
            "synth_train" => self.synth_train = parse(key, v)?,
            "synth_test" => self.synth_test = parse(key, v)?,
            "synth_size" => self.synth_size = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = parse_schedule(v)?,
            "cgc_lr_mult" => self.cgc_lr_mult = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "freeze_gates" => self.freeze_gates = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `arch` path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse_str(&text)?;
        if cfg.arch.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.arch = dir.join(&cfg.arch);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if let Some((e, f)) = self.lr_schedule.iter().find(|(_, f)| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config(format!("lr_schedule factor {f} at epoch {e} outside (0, 1]")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.cgc_lr_mult < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1); weight_decay and cgc_lr_mult must be non-negative".into()));
        }
        Ok(())
    }

    /// The network `arch` describes, gated when `gate` is set.
    pub fn network(&self, desc: &ArchDescriptor) -> Result<Network> {
        let net = Network::from_descriptor(desc)?;
        match &self.gate {
            Some(v) => net.with_cgc(&GateOptions::variant(v)?, None),
            None => Ok(net),
        }
    }

    /// Settings that determine the network and its training data, as `set`
    /// accepts them.
    pub fn data_entries(&self) -> Vec<(&'static str, String)> {
        let data = match self.data {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar10 => "cifar10",
        };
        vec![
            ("gate", self.gate.clone().unwrap_or_else(|| "none".into())),
            ("data", data.into()),
            ("synth_mode", self.synth_mode.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("synth_size", self.synth_size.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ]
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            gate_lr_mult: self.cgc_lr_mult,
            freeze_gates: self.freeze_gates,
        }
    }
}
