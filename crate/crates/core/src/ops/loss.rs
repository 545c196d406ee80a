//! Mean softmax cross-entropy.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returns the mean loss over the batch and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err(
            "softmax_cross_entropy",
            "axis 0",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    let mut probs = vec![T::zero(); b * k];
    let mut loss = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(shape_err("softmax_cross_entropy", "label", format!("label {label} >= {k} classes")));
        }
        let row = &ld[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        for j in 0..k {
            probs[n * k + j] = (row[j] - m).exp() / z;
        }
        loss += z.ln() + m - row[label];
    }
    Ok((loss / T::from_usize_lossy(b), Tensor::new(logits.shape(), probs)?))
}

/// Gradient with respect to the logits for upstream scalar gradient `g`.
pub fn softmax_cross_entropy_vjp<T: Scalar>(probs: &Tensor<T>, labels: &[usize], g: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let scale = g / T::from_usize_lossy(labels.len());
    let mut out = probs.scale(scale);
    for (n, &label) in labels.iter().enumerate() {
        out.data_mut()[n * k + label] -= scale;
    }
    out
}
