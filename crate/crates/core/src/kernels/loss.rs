use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.per_sample();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// Mean cross-entropy of `softmax(logits)` against one-hot `labels`, and
/// its gradient `(softmax - labels) / batch`.
pub fn softmax_crossentropy(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::shape(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if n < 2 {
        return Err(Error::Config(format!(
            "softmax cross-entropy needs at least 2 classes, got {n}"
        )));
    }
    labels.check_shape(logits.shape(), "one-hot labels")?;
    if b == 0 {
        return Err(Error::EmptyDataset("empty batch"));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let z = logits.sample(i);
        let y = labels.sample(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let g = grad.sample_mut(i);
        for j in 0..n {
            let s = (z[j] - lse).exp();
            loss -= y[j] * (z[j] - lse);
            g[j] = (s - y[j]) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.sample_mut(i)[l] = 1.0;
    }
    t
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        let z = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_crossentropy(&z, &one_hot(&[0, 4, 9], 10)).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let z = Tensor::new(vec![1, 3], vec![1e300, -1e300, 0.0]).unwrap();
        let (loss, g) = softmax_crossentropy(&z, &one_hot(&[1], 3)).unwrap();
        assert!(loss.is_finite());
        assert!(g.is_finite());
        let z = Tensor::new(vec![1, 2], vec![800.0, -800.0]).unwrap();
        let (loss, _) = softmax_crossentropy(&z, &one_hot(&[0], 2)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let z = Tensor::zeros(&[2, 1]);
        assert!(softmax_crossentropy(&z, &Tensor::full(&[2, 1], 1.0)).is_err());
    }

    #[test]
    fn accuracy_counts_hits() {
        let labels = [2, 0, 1, 1];
        let z = one_hot(&labels, 3);
        assert_eq!(accuracy(&z, &labels), 1.0);
        assert_eq!(accuracy(&z, &[2, 0, 0, 0]), 0.5);
    }
}
