use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]; `input` is the forward input (or output, same sign pattern).
pub fn relu_backward<T: Scalar>(grad: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(input, "relu_backward", |g, x| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of [`sigmoid`] given its forward output.
pub fn sigmoid_backward<T: Scalar>(grad: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(output, "sigmoid_backward", |g, s| g * s * (T::one() - s))
}

/// Softmax over the channel axis of `[N, C, H, W]`, independently per pixel.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("softmax_channels")?;
    let plane = h * w;
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = d[base + p];
            for k in 1..c {
                max = max.max(d[base + k * plane + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (d[base + k * plane + p] - max).exp();
                out[base + k * plane + p] = e;
                sum += e;
            }
            for k in 0..c {
                out[base + k * plane + p] /= sum;
            }
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.ensure_finite("softmax_channels")?;
    Ok(out)
}

/// Gradient of [`softmax_channels`] given its forward output.
pub fn softmax_channels_backward<T: Scalar>(grad: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.shape() != output.shape() {
        return shape_err(
            "softmax_channels_backward",
            format!("grad {:?} vs output {:?}", grad.shape(), output.shape()),
        );
    }
    let [n, c, h, w] = output.dims4("softmax_channels_backward")?;
    let plane = h * w;
    let (g, s) = (grad.data(), output.data());
    let mut out = vec![T::zero(); g.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let dot: T = (0..c).map(|k| g[base + k * plane + p] * s[base + k * plane + p]).sum();
            for k in 0..c {
                let i = base + k * plane + p;
                out[i] = s[i] * (g[i] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), out)
}
