use crate::error::{Error, Result};
use crate::linalg::Matrix2;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix2, labels: &[usize]) -> Result<(f64, Matrix2)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {batch} rows", labels.len()),
        ));
    }
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut grad = Matrix2::zeros(batch, classes);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - row[label];
        let g = grad.row_mut(i);
        for (gj, z) in g.iter_mut().zip(row) {
            *gj = (z - log_sum).exp() / batch as f64;
        }
        g[label] -= 1.0 / batch as f64;
    }
    Ok((total / batch as f64, grad))
}

/// Fraction of rows whose arg-max logit equals the label. Ties go to the lowest index.
pub fn accuracy(logits: &Matrix2, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(logits.row(i)) == label)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
