use super::{LabelMap, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Mean per-pixel cross-entropy of `[N, C, H, W]` logits against integer
/// labels, with its gradient `(softmax − one_hot) / (N·H·W)`.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<(T, Tensor<T>)> {
    let [n, c, h, w] = logits.dims4("cross_entropy_loss")?;
    if labels.shape() != [n, h, w] {
        return shape_err(
            "cross_entropy_loss",
            format!("labels {:?} do not match logits {:?}", labels.shape(), logits.shape()),
        );
    }
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("pixel count");
    let d = logits.data();
    let mut grad = vec![T::zero(); d.len()];
    let mut total = T::zero();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let label = labels.data()[b * plane + p];
            if label as usize >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            let mut max = d[base + p];
            for k in 1..c {
                max = max.max(d[base + k * plane + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (d[base + k * plane + p] - max).exp();
                grad[base + k * plane + p] = e;
                sum += e;
            }
            let log_z = max + sum.ln();
            total += log_z - d[base + label as usize * plane + p];
            for k in 0..c {
                let i = base + k * plane + p;
                let onehot = if k == label as usize { T::one() } else { T::zero() };
                grad[i] = (grad[i] / sum - onehot) / count;
            }
        }
    }
    let loss = total / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy_loss"));
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}
