use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Nearest-neighbour upsampling by an integer factor on both spatial axes.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("upsample_nearest")?;
    if factor == 0 {
        return shape_err("upsample_nearest", "factor must be >= 1");
    }
    let (oh, ow) = (h * factor, w * factor);
    let d = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor×factor` block.
pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = grad_out.dims4("upsample_nearest_backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return shape_err(
            "upsample_nearest_backward",
            format!("grad dims {oh}x{ow} not divisible by factor {factor}"),
        );
    }
    let (h, w) = (oh / factor, ow / factor);
    let g = grad_out.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
