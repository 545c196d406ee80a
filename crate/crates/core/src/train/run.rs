//! The epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataSource, TrainConfig};
use super::data::{augment, load_cifar10_dir, synth_dataset, Dataset};
use super::model::Model;
use super::optim::{lr_for_epoch, sgd_step, SgdState};
use crate::arch::ArchDescriptor;
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `train` (running average over the epoch's minibatches) or `eval`.
    pub split: &'static str,
    pub loss: f64,
    pub acc: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,loss,acc\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.epoch, r.split, r.loss, r.acc);
    }
    s
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy over `data` in fixed order, without updating
/// running statistics.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, mode: Mode, batch_size: usize) -> Result<(f64, f64)> {
    let mut m = model.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x)?;
        let f = m.forward(&mut tape, xv, mode, None)?;
        tape.set_scope("loss");
        let l = tape.cross_entropy(f.logits, &y)?;
        loss += tape.value(l).data()[0].as_f64() * chunk.len() as f64;
        let logits = tape.value(f.logits);
        let k = logits.shape()[1];
        correct += y.iter().enumerate().filter(|(i, &t)| argmax(&logits.data()[i * k..(i + 1) * k]) == t).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Trains `model` in place. Row `epoch = 0` holds the loss before any update.
pub fn train_model<T: Scalar>(cfg: &TrainConfig, model: &mut Model<T>, train: &Dataset<T>, test: Option<&Dataset<T>>) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let out_classes = model.net.output_shape().to_vec();
    if out_classes != [train.class_count] {
        return Err(Error::Config(format!(
            "network output {out_classes:?} does not match {} classes",
            train.class_count
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let sgd = cfg.sgd();
    let mut state = SgdState::new();
    let mut rows = Vec::new();
    let (l0, a0) = evaluate(model, train, Mode::Train, cfg.batch_size)?;
    rows.push(EpochMetrics { epoch: 0, split: "train", loss: l0, acc: a0 });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = lr_for_epoch(cfg.base_lr, &cfg.lr_schedule, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = train.batch(chunk)?;
            if cfg.augment {
                x = augment(&x, 4, &mut aug_rng);
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(x)?;
            let f = model.forward(&mut tape, xv, Mode::Train, None)?;
            tape.set_scope("loss");
            let l = tape.cross_entropy(f.logits, &y)?;
            loss_sum += tape.value(l).data()[0].as_f64() * chunk.len() as f64;
            let logits = tape.value(f.logits);
            let k = logits.shape()[1];
            correct += y.iter().enumerate().filter(|(i, &t)| argmax(&logits.data()[i * k..(i + 1) * k]) == t).count();
            let mut grads = tape.backward(l)?;
            let g: Vec<_> = f.params.iter().map(|&v| grads.take(v).unwrap_or_else(|| crate::tensor::Tensor::zeros(tape.shape(v)))).collect();
            sgd_step(&mut model.params, &g, lr, &sgd, &mut state)?;
        }
        let n = train.len() as f64;
        rows.push(EpochMetrics { epoch, split: "train", loss: loss_sum / n, acc: correct as f64 / n });
        if let Some(t) = test {
            let (l, a) = evaluate(model, t, Mode::Eval, 256)?;
            rows.push(EpochMetrics { epoch, split: "eval", loss: l, acc: a });
        }
    }
    Ok(rows)
}

/// Training and evaluation sets named by `cfg`; CIFAR-10 is read from
/// `data_dir`.
pub fn load_data<T: Scalar>(cfg: &TrainConfig, data_dir: Option<&Path>) -> Result<(Dataset<T>, Option<Dataset<T>>)> {
    match cfg.data {
        DataSource::Synthetic => {
            let tr = synth_dataset(cfg.data_seed, cfg.synth_classes, cfg.synth_train, cfg.synth_mode, cfg.synth_size)?;
            let te = if cfg.synth_test > 0 {
                let seed = cfg.data_seed ^ 0x5eed_7e57;
                Some(synth_dataset(seed, cfg.synth_classes, cfg.synth_test, cfg.synth_mode, cfg.synth_size)?)
            } else {
                None
            };
            Ok((tr, te))
        }
        DataSource::Cifar10 => {
            let dir = data_dir.ok_or_else(|| Error::Config("CIFAR-10 training needs a data directory".into()))?;
            let (tr, te) = load_cifar10_dir(dir)?;
            Ok((tr, Some(te)))
        }
    }
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: Vec<EpochMetrics>,
    pub arch_json: String,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn final_train(&self) -> &EpochMetrics {
        self.metrics.iter().rev().find(|m| m.split == "train").expect("epoch 0 row always present")
    }
}

/// Loads the architecture and data named by `cfg`, trains in 32-bit and,
/// when `out_dir` is given, writes `metrics.csv` and `model.ckpt` there.
pub fn train(cfg: &TrainConfig, data_dir: Option<&Path>, out_dir: Option<&Path>) -> Result<TrainOutcome<f32>> {
    let desc = ArchDescriptor::load(&cfg.arch)?;
    let net = cfg.network(&desc)?;
    let (tr, te) = load_data::<f32>(cfg, data_dir)?;
    let mut model = Model::init(&net, cfg.seed);
    let metrics = train_model(cfg, &mut model, &tr, te.as_ref())?;
    let arch_json = serde_json::to_string(&desc)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        let mut ck = model.checkpoint(&arch_json);
        for (k, v) in cfg.data_entries() {
            ck.set(&format!("train.{k}"), v);
        }
        ck.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { model, metrics, arch_json })
}
