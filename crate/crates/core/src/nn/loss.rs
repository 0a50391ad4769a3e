use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, classes) = match *logits.shape() {
        [n, c] => (n, c),
        _ => {
            return Err(Error::Shape(format!(
                "logits must be batch×classes, got {:?}",
                logits.shape()
            )))
        }
    };
    if n == 0 {
        return Err(Error::InvalidArgument("cross entropy over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let batch = T::from_usize(n).expect("batch fits");
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(n * classes);
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
        total = total + (sum.ln() - (row[label] - max));
        for (j, e) in exps.iter().enumerate() {
            let p = *e / sum;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) / batch);
        }
    }
    let loss = total / batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, classes], grad)?))
}
