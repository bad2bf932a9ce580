use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Non-overlapping max pooling. Returns the pooled tensor and, for every
/// output element, the flat index of the input element it came from.
/// Ties go to the first element in row-major scan order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return shape_err(
            "maxpool2d",
            format!("spatial dims {h}x{w} not divisible by window {window}"),
        );
    }
    let (oh, ow) = (h / window, w / window);
    let d = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (oy * window + dy) * w + ox * window + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                out.push(d[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

/// Routes each output gradient to the argmax position recorded by [`maxpool2d`].
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return shape_err(
            "maxpool2d_backward",
            format!(
                "grad_out has {} elements but {} argmax indices were recorded",
                grad_out.len(),
                argmax.len()
            ),
        );
    }
    let mut grad = Tensor::zeros(input_shape);
    let gd = grad.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        if i >= gd.len() {
            return shape_err("maxpool2d_backward", format!("argmax index {i} out of range"));
        }
        gd[i] += g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_window_picks_max() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(&Tensor::full(&[1, 1, 1, 1], 1.0f32), &idx, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_input_routes_to_first() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 5.0);
        let (_, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(idx, vec![0, 2, 8, 10]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let (y, _) = maxpool2d(&x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * oy + dy) * 8 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 4 + ox], m);
            }
        }
    }
}
