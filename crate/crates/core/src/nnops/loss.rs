use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `(N, K, 1, 1)` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.channels() * logits.spatial();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean cross-entropy over the batch; also returns the softmax
/// probabilities for the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let n = logits.batch();
    let k = logits.channels() * logits.spatial();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits);
    let mut total = T::zero();
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        total += -(row[label].max(T::min_positive_value())).ln();
    }
    Ok((total / T::lit(n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad: T,
) -> Tensor<T> {
    let n = probs.batch();
    let k = probs.channels() * probs.spatial();
    let scale = grad / T::lit(n as f64);
    let mut out = probs.clone();
    for (row, &label) in out.data_mut().chunks_mut(k.max(1)).zip(labels) {
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros([2, 4, 1, 1]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros([1, 3, 1, 1]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
