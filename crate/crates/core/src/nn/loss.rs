use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch, with its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [b, classes] = logits.dims2("cross entropy")?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * classes];
    for (n, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss = loss + (log_sum - row[label]);
        let g = &mut grad[n * classes..(n + 1) * classes];
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - log_sum).exp() * inv_b;
        }
        g[label] = g[label] - inv_b;
    }
    Ok((loss * inv_b, Tensor::new(vec![b, classes], grad)?))
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
