//! Clustering of gated kernels by class: per-class mean kernels, intra-class
//! spread, inter-class distances and their comparison.

use std::fmt::Write as _;
use std::path::Path;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::train::{Dataset, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    /// Mean flattened gated kernel per class.
    pub class_means: Vec<Vec<f64>>,
    /// Mean L2 distance of a class's samples to its mean.
    pub intra: Vec<f64>,
    /// L2 distances between class means.
    pub inter: Vec<Vec<f64>>,
    /// `diff[i][j] = inter[i][j] - intra[i]`: row `i` compares every other
    /// class against the spread of class `i`.
    pub diff: Vec<Vec<f64>>,
    /// Fraction of ordered pairs `i != j` with `inter[i][j] > intra[i]`.
    pub frac_inter_gt_intra: f64,
}

/// The gated layer deepest in execution order.
pub fn last_cgc_layer(net: &Network) -> Option<String> {
    net.cgc_layer_ids().pop()
}

/// Flattened gated kernels of `layer`, one per sample, computed in eval mode.
pub fn sample_kernels<T: Scalar>(model: &Model<T>, data: &Dataset<T>, layer: &str) -> Result<Vec<Vec<f64>>> {
    let mut m = model.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(64) {
        let (x, _) = data.batch(chunk)?;
        let k = m.modulated_kernels(&x, layer, Mode::Eval)?;
        let per = k.len() / chunk.len();
        out.extend(k.data().chunks(per).map(|c| c.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

/// Per-class mean of `samples`; a class without samples is an error.
pub fn class_means(samples: &[Vec<f64>], labels: &[usize], class_count: usize) -> Result<Vec<Vec<f64>>> {
    if samples.len() != labels.len() {
        return Err(Error::Data(format!("{} samples but {} labels", samples.len(), labels.len())));
    }
    let dim = samples.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for (s, &l) in samples.iter().zip(labels) {
        if l >= class_count || s.len() != dim {
            return Err(Error::Data(format!("sample with label {l} and length {} does not fit", s.len())));
        }
        counts[l] += 1;
        for (a, v) in sums[l].iter_mut().zip(s) {
            *a += v;
        }
    }
    let empty: Vec<String> = counts.iter().enumerate().filter(|(_, &n)| n == 0).map(|(c, _)| c.to_string()).collect();
    if !empty.is_empty() {
        return Err(Error::Data(format!("no samples for class(es) {}", empty.join(", "))));
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

/// Per-class mean gated kernel of `layer` over `data`.
pub fn class_mean_kernels<T: Scalar>(model: &Model<T>, data: &Dataset<T>, layer: &str) -> Result<Vec<Vec<f64>>> {
    class_means(&sample_kernels(model, data, layer)?, &data.labels, data.class_count)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance_stats(class_means: &[Vec<f64>], samples: &[Vec<f64>], labels: &[usize]) -> Result<GateStats> {
    let k = class_means.len();
    if k < 2 {
        return Err(Error::Data(format!("distance statistics need at least 2 classes, got {k}")));
    }
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (s, &l) in samples.iter().zip(labels) {
        if l >= k {
            return Err(Error::Data(format!("label {l} outside [0, {k})")));
        }
        sum[l] += l2(s, &class_means[l]);
        count[l] += 1;
    }
    let intra: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    let mut inter = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = l2(&class_means[i], &class_means[j]);
            inter[i][j] = d;
            inter[j][i] = d;
        }
    }
    let diff: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| inter[i][j] - intra[i]).collect()).collect();
    let hits = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).filter(|&(i, j)| i != j && inter[i][j] > intra[i]).count();
    Ok(GateStats {
        class_means: class_means.to_vec(),
        intra,
        inter,
        diff,
        frac_inter_gt_intra: hits as f64 / (k * (k - 1)) as f64,
    })
}

/// Gate statistics of `layer` (the last gated layer by default).
pub fn analyze<T: Scalar>(model: &Model<T>, data: &Dataset<T>, layer: Option<&str>) -> Result<GateStats> {
    let id = match layer {
        Some(l) => l.to_string(),
        None => last_cgc_layer(&model.net).ok_or_else(|| Error::Config("network has no gated convolution".into()))?,
    };
    let samples = sample_kernels(model, data, &id)?;
    let means = class_means(&samples, &data.labels, data.class_count)?;
    distance_stats(&means, &samples, &data.labels)
}

fn row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",")
}

impl GateStats {
    /// Sections `# inter`, `# intra`, `# diff` with one CSV row per class,
    /// then `# summary`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# inter\n");
        for r in &self.inter {
            let _ = writeln!(s, "{}", row(r));
        }
        let _ = writeln!(s, "# intra\n{}", row(&self.intra));
        s.push_str("# diff\n");
        for r in &self.diff {
            let _ = writeln!(s, "{}", row(r));
        }
        let _ = writeln!(s, "# summary\nclasses={},frac_inter_gt_intra={:.4}", self.intra.len(), self.frac_inter_gt_intra);
        s
    }
}

pub fn export_stats(stats: &GateStats, path: &Path) -> Result<()> {
    std::fs::write(path, stats.to_csv())?;
    Ok(())
}

/// Matrices read back from [`export_stats`] output. Class means are not
/// exported and come back empty; the fraction is recomputed from the
/// matrices.
pub fn parse_stats(text: &str) -> Result<GateStats> {
    let mut section = "";
    let (mut inter, mut intra, mut diff) = (Vec::new(), Vec::new(), Vec::new());
    let nums = |line: &str| -> Result<Vec<f64>> {
        line.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{v}`: {e}"))))
            .collect()
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(name) = line.strip_prefix("# ") {
            section = match name.trim() {
                "inter" => "inter",
                "intra" => "intra",
                "diff" => "diff",
                "summary" => "summary",
                other => return Err(Error::Parse(format!("unknown section `{other}`"))),
            };
            continue;
        }
        match section {
            "inter" => inter.push(nums(line)?),
            "intra" => intra = nums(line)?,
            "diff" => diff.push(nums(line)?),
            "summary" => {}
            _ => return Err(Error::Parse("data before the first section header".into())),
        }
    }
    let k = intra.len();
    if inter.len() != k || diff.len() != k || inter.iter().chain(&diff).any(|r| r.len() != k) {
        return Err(Error::Parse(format!("matrices are not {k}x{k}")));
    }
    let hits = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).filter(|&(i, j)| i != j && inter[i][j] > intra[i]).count();
    let frac = if k > 1 { hits as f64 / (k * (k - 1)) as f64 } else { 0.0 };
    Ok(GateStats { class_means: Vec::new(), intra, inter, diff, frac_inter_gt_intra: frac })
}

pub fn read_stats(path: &Path) -> Result<GateStats> {
    parse_stats(&std::fs::read_to_string(path)?)
}
