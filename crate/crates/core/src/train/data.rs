//! Labelled image datasets: CIFAR-10 binary files and synthetic sets.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of the CIFAR-10 training set
/// pixels scaled to `[0, 1]`.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `[n, c, h, w]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, class_count: usize, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Data(format!("sample {i}: label {l} outside [0, {class_count})")));
        }
        Ok(Self { images, labels, class_count, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images `[indices.len(), c, h, w]` and their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(&shape, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Per-sample context as a 3x3 gate sees it: each channel average-pooled
    /// to `[3, 3]`, flattened channel-major.
    pub fn pooled_summary(&self) -> Result<Vec<Vec<f64>>> {
        let p = crate::ops::adaptive_pool(&self.images, &[3, 3], crate::ops::PoolKind::Avg)?;
        let per = p.len() / self.len().max(1);
        Ok(p.data().chunks(per).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
    }

    /// Mean pooled summary of each class.
    pub fn class_pooled_means(&self) -> Result<Vec<Vec<f64>>> {
        crate::analysis::class_means(&self.pooled_summary()?, &self.labels, self.class_count)
    }
}

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes. Pixels are scaled to `[0, 1]` and standardized with
/// [`CIFAR_MEAN`] and [`CIFAR_STD`].
pub fn parse_cifar10<T: Scalar>(bytes: &[u8], split: &str) -> Result<Dataset<T>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "length {} is not a positive multiple of the {CIFAR_RECORD}-byte record size (trailing record starts at byte offset {})",
            bytes.len(),
            bytes.len() - bytes.len() % CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("label {} at byte offset {} exceeds 9", rec[0], r * CIFAR_RECORD)));
        }
        labels.push(rec[0] as usize);
        for (ch, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(plane.iter().map(|&p| T::lit((p as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch])));
        }
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], images)?, labels, 10, split)
}

pub fn load_cifar10_bin<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let split = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cifar10");
    parse_cifar10(&bytes, split).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// `data_batch_1..5.bin` as the training split and `test_batch.bin` as the
/// evaluation split.
pub fn load_cifar10_dir<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let d: Dataset<T> = load_cifar10_bin(&dir.join(format!("data_batch_{i}.bin")))?;
        labels.extend(d.labels);
        images.extend(d.images.into_data());
    }
    let n = labels.len();
    let train = Dataset::new(Tensor::new(&[n, 3, 32, 32], images)?, labels, 10, "train")?;
    let mut test: Dataset<T> = load_cifar10_bin(&dir.join("test_batch.bin"))?;
    test.split = "test".into();
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    /// Classes differ in where the image is bright; local texture is drawn
    /// independently of the class.
    ContextSeparable,
    /// Classes differ in local texture; a uniform brightness offset is drawn
    /// independently of the class.
    Plain,
}

impl FromStr for SynthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" | "context-separable" => Ok(Self::ContextSeparable),
            "plain" => Ok(Self::Plain),
            _ => Err(Error::Config(format!("unknown synthetic mode `{s}` (expected context-separable or plain)"))),
        }
    }
}

impl std::fmt::Display for SynthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ContextSeparable => "context-separable",
            Self::Plain => "plain",
        })
    }
}

/// Bright region of each context class: the four quadrants, then the four
/// half-planes. Returns +1 inside the region and a negative constant outside
/// so that every layout has zero spatial mean.
fn layout(k: usize, y: usize, x: usize, size: usize) -> f64 {
    let (top, left) = (y < size / 2, x < size / 2);
    let (inside, area) = match k {
        0 => (top && left, 4.0),
        1 => (top && !left, 4.0),
        2 => (!top && left, 4.0),
        3 => (!top && !left, 4.0),
        4 => (left, 2.0),
        5 => (!left, 2.0),
        6 => (top, 2.0),
        _ => (!top, 2.0),
    };
    if inside {
        1.0
    } else {
        -1.0 / (area - 1.0)
    }
}

const TEXTURES: usize = 8;

/// Oriented grating `t` at pixel `(i, j)`: four orientations at period 4,
/// then the same at period 8.
fn texture(t: usize, i: usize, j: usize, phase: f64) -> f64 {
    let (di, dj) = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)][t % 4];
    let period = if t < 4 { 4.0 } else { 8.0 };
    (std::f64::consts::TAU * (di * i as f64 + dj * j as f64) / period + phase).sin()
}

const LAYOUT_AMPLITUDE: f64 = 0.5;
const LAYOUT_JITTER: f64 = 0.3;
const PLAIN_OFFSET: f64 = 0.75;
const PIXEL_NOISE: f64 = 1.0;

/// Three-channel `size x size` images with balanced labels (`label = i mod
/// class_count`), each a layout, a random-phase grating with per-channel gain
/// in `[0.5, 1)` and unit Gaussian pixel noise.
///
/// Context-separable sets draw the grating from eight textures regardless of
/// class; class `k` sets the layout (quadrant or half-plane, zero mean) at
/// amplitude `0.5 + N(0, 0.3)` per channel. Plain sets pick the grating by
/// class over a uniform offset; consecutive samples of a class take opposite
/// offsets so class-mean pooled summaries coincide up to noise.
pub fn synth_dataset<T: Scalar>(seed: u64, class_count: usize, n: usize, mode: SynthMode, size: usize) -> Result<Dataset<T>> {
    if !(2..=8).contains(&class_count) {
        return Err(Error::Config(format!("synthetic datasets support 2 to 8 classes, got {class_count}")));
    }
    if n < class_count {
        return Err(Error::Config(format!("need at least one sample per class: n={n} < {class_count}")));
    }
    if size < 4 || !size.is_multiple_of(8) {
        return Err(Error::Config(format!("synthetic image size must be a positive multiple of 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(LAYOUT_AMPLITUDE, LAYOUT_JITTER).expect("valid");
    let offset = Normal::new(0.0, PLAIN_OFFSET).expect("valid");
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid");
    let mut last_offset: Vec<Option<[f64; 3]>> = vec![None; class_count];
    let mut images = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % class_count;
        let (tex, bright) = match mode {
            SynthMode::ContextSeparable => {
                let b = [0; 3].map(|_| jitter.sample(&mut rng));
                (rng.gen_range(0..TEXTURES), b)
            }
            SynthMode::Plain => {
                let b = match last_offset[k].take() {
                    Some(prev) => prev.map(|v| -v),
                    None => {
                        let b = [0; 3].map(|_| offset.sample(&mut rng));
                        last_offset[k] = Some(b);
                        b
                    }
                };
                (k, b)
            }
        };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let gains: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.5..1.0));
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let base = match mode {
                        SynthMode::ContextSeparable => bright[ch] * layout(k, y, x, size),
                        SynthMode::Plain => bright[ch],
                    };
                    let v = base + gains[ch] * texture(tex, y, x, phase) + noise.sample(&mut rng);
                    images.push(T::lit(v));
                }
            }
        }
        labels.push(k);
    }
    let split = match mode {
        SynthMode::ContextSeparable => "synthetic-context",
        SynthMode::Plain => "synthetic-plain",
    };
    Dataset::new(Tensor::new(&[n, 3, size, size], images)?, labels, class_count, split)
}

/// Zero-pads by `pad` pixels, crops a random window of the original size and
/// flips horizontally with probability one half, per sample.
pub fn augment<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, pad: usize, rng: &mut R) -> Tensor<T> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = batch.data();
    let mut out = vec![T::zero(); batch.len()];
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}
