use super::{matmul, Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Geometry of a square-kernel 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 {
            return shape_err(
                "ConvSpec",
                format!(
                    "kernel_size {} and stride {} must be >= 1",
                    self.kernel_size, self.stride
                ),
            );
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return shape_err("ConvSpec", "channel counts must be >= 1");
        }
        Ok(())
    }

    /// Output extent along one spatial axis.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return shape_err(
                "ConvSpec",
                format!(
                    "input extent {input} with padding {} is smaller than kernel {}",
                    self.padding, self.kernel_size
                ),
            );
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    /// Kernel tensor shape `[C_out, C_in, k, k]`.
    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    /// Column count of the matricized kernel, `C_in·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }

    fn check_input(&self, input: &[usize; 4], op: &'static str) -> Result<(usize, usize)> {
        self.validate()?;
        let [_, c, h, w] = *input;
        if c != self.in_channels {
            return shape_err(
                op,
                format!(
                    "input channels {c} do not match spec in_channels {}",
                    self.in_channels
                ),
            );
        }
        Ok((self.output_size(h)?, self.output_size(w)?))
    }

    fn check_kernel(&self, kernel: &[usize], op: &'static str) -> Result<()> {
        let expected = self.kernel_shape();
        if kernel != expected {
            let dim = ["out_channels", "in_channels", "kernel height", "kernel width"];
            let which = kernel
                .iter()
                .zip(expected.iter())
                .position(|(a, b)| a != b)
                .map(|i| dim[i])
                .unwrap_or("rank");
            return shape_err(
                op,
                format!("kernel shape {kernel:?} differs from {expected:?} in {which}"),
            );
        }
        Ok(())
    }
}

/// Unfolds one `[C, H, W]` image into a `(C·k·k) × (H'·W')` patch matrix.
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = spec.kernel_size;
    let pad = spec.padding as isize;
    let stride = spec.stride as isize;
    let out_plane = oh * ow;
    for ci in 0..c {
        let chan = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..oh {
                    let iy = oy as isize * stride + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto an image,
/// accumulating overlapping contributions.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let k = spec.kernel_size;
    let pad = spec.padding as isize;
    let stride = spec.stride as isize;
    let out_plane = oh * ow;
    for ci in 0..c {
        let chan = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..oh {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[N, C_in, H, W]` input with `[C_out, C_in, k, k]`
/// kernel plus per-output-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let dims = input.dims4("conv2d_forward")?;
    let (oh, ow) = spec.check_input(&dims, "conv2d_forward")?;
    spec.check_kernel(kernel.shape(), "conv2d_forward")?;
    if bias.shape() != [spec.out_channels] {
        return shape_err(
            "conv2d_forward",
            format!(
                "bias shape {:?} must be [{}] (out_channels)",
                bias.shape(),
                spec.out_channels
            ),
        );
    }
    let [n, c, h, w] = dims;
    let co = spec.out_channels;
    let patch = spec.patch_len();
    let out_plane = oh * ow;
    let mut out = vec![T::zero(); n * co * out_plane];
    let mut cols = vec![T::zero(); patch * out_plane];
    let in_stride = c * h * w;
    for b in 0..n {
        im2col(
            &input.data()[b * in_stride..(b + 1) * in_stride],
            c,
            h,
            w,
            spec,
            oh,
            ow,
            &mut cols,
        );
        let dst = &mut out[b * co * out_plane..(b + 1) * co * out_plane];
        matmul(co, patch, out_plane, kernel.data(), false, &cols, false, dst, false);
        for (oc, chan) in dst.chunks_mut(out_plane).enumerate() {
            let bv = bias.data()[oc];
            chan.iter_mut().for_each(|v| *v += bv);
        }
    }
    let out = Tensor::new(vec![n, co, oh, ow], out)?;
    out.ensure_finite("conv2d_forward")?;
    Ok(out)
}

/// Gradients of [`conv2d_forward`]. `input` is `None` when it was not requested.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Full backward pass: gradients for input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_opt(grad_out, input, kernel, spec, true, true)?;
    Ok((
        g.input.expect("requested"),
        g.kernel.expect("requested"),
        g.bias.expect("requested"),
    ))
}

/// Backward pass that only computes the requested gradients.
pub fn conv2d_backward_opt<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads<T>> {
    let dims = input.dims4("conv2d_backward")?;
    let (oh, ow) = spec.check_input(&dims, "conv2d_backward")?;
    spec.check_kernel(kernel.shape(), "conv2d_backward")?;
    let [n, c, h, w] = dims;
    let co = spec.out_channels;
    if grad_out.shape() != [n, co, oh, ow] {
        return shape_err(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} differs from forward output {:?}",
                grad_out.shape(),
                [n, co, oh, ow]
            ),
        );
    }
    let patch = spec.patch_len();
    let out_plane = oh * ow;
    let in_stride = c * h * w;
    let mut grad_kernel = want_params.then(|| vec![T::zero(); co * patch]);
    let mut grad_bias = want_params.then(|| vec![T::zero(); co]);
    let mut grad_input = want_input.then(|| vec![T::zero(); n * in_stride]);
    let mut cols = vec![T::zero(); patch * out_plane];
    for b in 0..n {
        let g = &grad_out.data()[b * co * out_plane..(b + 1) * co * out_plane];
        if let (Some(gk), Some(gb)) = (grad_kernel.as_mut(), grad_bias.as_mut()) {
            im2col(
                &input.data()[b * in_stride..(b + 1) * in_stride],
                c,
                h,
                w,
                spec,
                oh,
                ow,
                &mut cols,
            );
            matmul(co, out_plane, patch, g, false, &cols, true, gk, true);
            for (oc, chan) in g.chunks(out_plane).enumerate() {
                gb[oc] += chan.iter().copied().sum::<T>();
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            matmul(patch, co, out_plane, kernel.data(), true, g, false, &mut cols, false);
            col2im(
                &cols,
                c,
                h,
                w,
                spec,
                oh,
                ow,
                &mut gi[b * in_stride..(b + 1) * in_stride],
            );
        }
    }
    let input = grad_input
        .map(|d| Tensor::new(vec![n, c, h, w], d))
        .transpose()?;
    let kernel = grad_kernel
        .map(|d| Tensor::new(spec.kernel_shape().to_vec(), d))
        .transpose()?;
    let bias = grad_bias.map(|d| Tensor::new(vec![co], d)).transpose()?;
    for t in [&input, &kernel, &bias].into_iter().flatten() {
        t.ensure_finite("conv2d_backward")?;
    }
    Ok(ConvGrads {
        input,
        kernel,
        bias,
    })
}
