//! Low-rank adapter for a frozen convolution.
//!
//! The kernel `W ∈ R^{C_out × C_in × k × k}` is treated as the matrix
//! `W ∈ R^{m×n}` with `m = C_out` and `n = C_in·k·k` (row-major flattening).
//! The adapter adds a trainable delta `ΔW = s · X·Y` with `X ∈ R^{m×r}` and
//! `Y ∈ R^{r×n}`, so the layer computes `h = W x + ΔW x`. `Y` starts at zero,
//! which makes a freshly initialised adapter an exact identity wrapper
//! around the frozen convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d_backward_opt, conv2d_forward, matmul, ConvSpec, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLoraAdapter<T: Scalar> {
    frozen_kernel: Tensor<T>,
    frozen_bias: Tensor<T>,
    /// `m × r`, Gaussian at init.
    pub x: Tensor<T>,
    /// `r × n`, zero at init.
    pub y: Tensor<T>,
    rank: usize,
    spec: ConvSpec,
    /// Multiplier on `X·Y`; 1 unless configured otherwise.
    scale: T,
}

/// Gradients of the adapter's trainable factors and of its input.
#[derive(Debug, Clone)]
pub struct LoraGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

/// `(m, n)` of the matricized kernel.
pub fn matrix_dims(spec: &ConvSpec) -> (usize, usize) {
    (spec.out_channels, spec.patch_len())
}

impl<T: Scalar> ConvLoraAdapter<T> {
    /// Wraps a frozen kernel with rank-`rank` factors: `X ~ N(0, 1/m)` drawn
    /// from a ChaCha8 stream seeded with `seed`, `Y = 0`.
    pub fn init(
        frozen_kernel: Tensor<T>,
        frozen_bias: Tensor<T>,
        spec: ConvSpec,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if frozen_kernel.shape() != spec.kernel_shape() {
            return shape_err(
                "ConvLoraAdapter::init",
                format!(
                    "kernel {:?} does not match spec {:?}",
                    frozen_kernel.shape(),
                    spec.kernel_shape()
                ),
            );
        }
        if frozen_bias.shape() != [spec.out_channels] {
            return shape_err(
                "ConvLoraAdapter::init",
                format!("bias {:?} must be [{}]", frozen_bias.shape(), spec.out_channels),
            );
        }
        let (m, n) = matrix_dims(&spec);
        if rank == 0 || rank >= m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} must satisfy 1 <= r < min(m, n) = {}",
                m.min(n)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[m, rank], 1.0 / (m as f64).sqrt(), &mut rng);
        Ok(Self {
            frozen_kernel,
            frozen_bias,
            x,
            y: Tensor::zeros(&[rank, n]),
            rank,
            spec,
            scale: T::one(),
        })
    }

    /// Rebuilds an adapter from stored factors (checkpoint loading).
    pub fn from_parts(
        frozen_kernel: Tensor<T>,
        frozen_bias: Tensor<T>,
        spec: ConvSpec,
        x: Tensor<T>,
        y: Tensor<T>,
    ) -> Result<Self> {
        let rank = x.shape().get(1).copied().unwrap_or(0);
        let mut adapter = Self::init(frozen_kernel, frozen_bias, spec, rank.max(1), 0)?;
        adapter.set_factors(x, y)?;
        Ok(adapter)
    }

    pub fn set_factors(&mut self, x: Tensor<T>, y: Tensor<T>) -> Result<()> {
        if x.shape() != self.x.shape() || y.shape() != self.y.shape() {
            return shape_err(
                "ConvLoraAdapter::set_factors",
                format!(
                    "expected X {:?} and Y {:?}, got {:?} and {:?}",
                    self.x.shape(),
                    self.y.shape(),
                    x.shape(),
                    y.shape()
                ),
            );
        }
        self.x = x;
        self.y = y;
        Ok(())
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn frozen_kernel(&self) -> &Tensor<T> {
        &self.frozen_kernel
    }

    pub fn frozen_bias(&self) -> &Tensor<T> {
        &self.frozen_bias
    }

    /// `s · X·Y` reshaped to the kernel layout `[C_out, C_in, k, k]`.
    pub fn delta_kernel(&self) -> Tensor<T> {
        let (m, n) = matrix_dims(&self.spec);
        let mut prod = vec![T::zero(); m * n];
        matmul(m, self.rank, n, self.x.data(), false, self.y.data(), false, &mut prod, false);
        if self.scale != T::one() {
            prod.iter_mut().for_each(|v| *v *= self.scale);
        }
        Tensor::new(self.spec.kernel_shape().to_vec(), prod).expect("kernel shape")
    }

    /// Frozen convolution plus the low-rank branch, summed elementwise.
    /// The bias is applied once, in the frozen branch.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = conv2d_forward(input, &self.frozen_kernel, &self.frozen_bias, &self.spec)?;
        let delta = self.delta_kernel();
        if !delta.is_all_zero() {
            let zero_bias = Tensor::zeros(&[self.spec.out_channels]);
            let branch = conv2d_forward(input, &delta, &zero_bias, &self.spec)?;
            out.add_assign(&branch)?;
        }
        Ok(out)
    }

    /// Gradients for `X`, `Y` and (optionally) the input. The frozen kernel
    /// never receives a gradient.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>, want_input: bool) -> Result<LoraGrads<T>> {
        // Both branches share the same input, so the input gradient of the
        // sum is the input gradient of a convolution with the summed kernel,
        // and the kernel gradient is shared by the two branches.
        let (effective, _) = self.merge();
        let g = conv2d_backward_opt(grad_out, input, &effective, &self.spec, want_input, true)?;
        let grad_w = g.kernel.expect("requested");
        let (m, n) = matrix_dims(&self.spec);
        let r = self.rank;
        let mut gx = vec![T::zero(); m * r];
        let mut gy = vec![T::zero(); r * n];
        // dL/dX = s · G·Yᵀ ; dL/dY = s · Xᵀ·G
        matmul(m, n, r, grad_w.data(), false, self.y.data(), true, &mut gx, false);
        matmul(r, m, n, self.x.data(), true, grad_w.data(), false, &mut gy, false);
        if self.scale != T::one() {
            gx.iter_mut().chain(gy.iter_mut()).for_each(|v| *v *= self.scale);
        }
        Ok(LoraGrads {
            x: Tensor::new(vec![m, r], gx)?,
            y: Tensor::new(vec![r, n], gy)?,
            input: g.input,
        })
    }

    /// Folds the low-rank delta into the kernel: `(W + s·X·Y, b)`.
    pub fn merge(&self) -> (Tensor<T>, Tensor<T>) {
        let merged = self
            .frozen_kernel
            .add(&self.delta_kernel())
            .expect("delta has kernel shape");
        (merged, self.frozen_bias.clone())
    }

    /// `m·r + r·n`.
    pub fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.spec, self.rank)
    }
}

/// Number of trainable adapter parameters for a convolution of this shape.
pub fn trainable_param_count(spec: &ConvSpec, rank: usize) -> usize {
    let (m, n) = matrix_dims(spec);
    m * rank + rank * n
}

/// Parameters of fully fine-tuning the same convolution (kernel plus bias).
pub fn full_param_count(spec: &ConvSpec) -> usize {
    let (m, n) = matrix_dims(spec);
    m * n + m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn random_adapter(seed: u64, cin: usize, cout: usize, rank: usize) -> (ConvLoraAdapter<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::same(cin, cout, 3);
        let k = Tensor::randn(&spec.kernel_shape(), 0.5, &mut rng);
        let b = Tensor::randn(&[cout], 0.5, &mut rng);
        let mut a = ConvLoraAdapter::init(k, b, spec, rank, seed).unwrap();
        let y = Tensor::randn(a.y.shape(), 0.5, &mut rng);
        a.y = y;
        (a, rng)
    }

    #[test]
    fn rank_two_factor_shapes() {
        let spec = ConvSpec::same(16, 32, 3);
        let a = ConvLoraAdapter::<f32>::init(
            Tensor::zeros(&spec.kernel_shape()),
            Tensor::zeros(&[32]),
            spec,
            2,
            1,
        )
        .unwrap();
        assert_eq!(a.x.shape(), &[32, 2]);
        assert_eq!(a.y.shape(), &[2, 16 * 9]);
        assert!(a.y.is_all_zero());
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let spec = ConvSpec::same(1, 2, 1); // m = 2, n = 1
        let k = Tensor::<f32>::zeros(&spec.kernel_shape());
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(ConvLoraAdapter::init(k.clone(), b.clone(), spec, 1, 0).is_err());
        assert!(ConvLoraAdapter::init(k, b, ConvSpec::same(4, 4, 3), 0, 0).is_err());
    }

    #[test]
    fn init_is_identity_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::same(3, 5, 3);
        let k = Tensor::<f32>::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[5], 1.0, &mut rng);
        let a1 = ConvLoraAdapter::init(k.clone(), b.clone(), spec, 2, 77).unwrap();
        let a2 = ConvLoraAdapter::init(k.clone(), b.clone(), spec, 2, 77).unwrap();
        assert_eq!(a1.x, a2.x);
        let x = Tensor::<f32>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let plain = conv2d_forward(&x, &k, &b, &spec).unwrap();
        assert_eq!(a1.forward(&x).unwrap().data(), plain.data());
    }

    #[test]
    fn known_delta_matches_single_convolution() {
        // Build a delta D of rank r by hand and check the two-branch forward
        // against one convolution with the kernel W + D.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ConvSpec::same(2, 4, 3); // m = 4, n = 18
        let k = Tensor::<f64>::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let r = 3;
        let mut a = ConvLoraAdapter::init(k.clone(), b.clone(), spec, r, 5).unwrap();
        let x_f = Tensor::<f64>::randn(&[4, r], 1.0, &mut rng);
        let y_f = Tensor::<f64>::randn(&[r, 18], 1.0, &mut rng);
        let mut d = Tensor::<f64>::zeros(&spec.kernel_shape());
        for i in 0..4 {
            for j in 0..18 {
                d.data_mut()[i * 18 + j] = (0..r).map(|q| x_f.data()[i * r + q] * y_f.data()[q * 18 + j]).sum();
            }
        }
        a.set_factors(x_f, y_f).unwrap();
        let input = Tensor::<f64>::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let via_adapter = a.forward(&input).unwrap();
        let via_merged = conv2d_forward(&input, &k.add(&d).unwrap(), &b, &spec).unwrap();
        let scale = via_merged.max_abs();
        for (p, q) in via_adapter.data().iter().zip(via_merged.data()) {
            assert!((p - q).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn delta_branch_is_linear_in_x() {
        let (a, mut rng) = random_adapter(31, 2, 3, 2);
        let input = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let mut doubled = a.clone();
        doubled.x = a.x.scale(2.0);
        let frozen = conv2d_forward(&input, a.frozen_kernel(), a.frozen_bias(), a.spec()).unwrap();
        let delta_only = a.forward(&input).unwrap().sub(&frozen).unwrap();
        let diff = doubled.forward(&input).unwrap().sub(&a.forward(&input).unwrap()).unwrap();
        for (p, q) in diff.data().iter().zip(delta_only.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (a, mut rng) = random_adapter(100 + seed, 2, 3, 2);
            let input = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[1, 3, 5, 5], 1.0, &mut rng);
            let g = a.backward(&input, &w, true).unwrap();
            let base = a.clone();
            let wc = w.clone();
            let mut params = vec![a.x.clone(), a.y.clone()];
            let report = gradcheck(
                |p| {
                    let mut ad = base.clone();
                    ad.set_factors(p[0].clone(), p[1].clone()).unwrap();
                    let out = ad.forward(&input).unwrap();
                    out.data().iter().zip(wc.data()).map(|(o, w)| o * w).sum()
                },
                &mut params,
                &[g.x, g.y],
                1e-5,
            );
            assert!(report.passes(1e-6), "{:?}", report.per_tensor);
        }
    }

    #[test]
    fn zero_y_still_has_nonzero_y_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ConvSpec::same(2, 3, 3);
        let k = Tensor::<f64>::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let b = Tensor::<f64>::zeros(&[3]);
        let a = ConvLoraAdapter::init(k, b, spec, 2, 4).unwrap();
        let input = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[1, 3, 5, 5], 1.0, &mut rng);
        let g = a.backward(&input, &w, false).unwrap();
        assert!(g.x.is_all_zero(), "dL/dX = G·Yᵀ vanishes while Y = 0");
        assert!(g.y.max_abs() > 1e-3);
        let base = a.clone();
        let mut params = vec![a.y.clone()];
        let report = gradcheck(
            |p| {
                let mut ad = base.clone();
                ad.y = p[0].clone();
                ad.forward(&input).unwrap().data().iter().zip(w.data()).map(|(o, w)| o * w).sum()
            },
            &mut params,
            &[g.y],
            1e-5,
        );
        assert!(report.passes(1e-6), "{:?}", report.per_tensor);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let (a, mut rng) = random_adapter(3, 2, 3, 2);
        let input = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let g = a.backward(&input, &Tensor::zeros(&[1, 3, 4, 4]), true).unwrap();
        assert!(g.x.is_all_zero() && g.y.is_all_zero() && g.input.unwrap().is_all_zero());
    }

    #[test]
    fn merge_of_fresh_adapter_is_frozen_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::same(2, 3, 3);
        let k = Tensor::<f32>::randn(&spec.kernel_shape(), 1.0, &mut rng);
        let a = ConvLoraAdapter::init(k.clone(), Tensor::zeros(&[3]), spec, 2, 1).unwrap();
        assert_eq!(a.merge().0, k);
    }

    #[test]
    fn merge_then_rewrap_preserves_forward() {
        let (a, mut rng) = random_adapter(12, 3, 4, 2);
        let (mk, mb) = a.merge();
        let rewrapped = ConvLoraAdapter::init(mk, mb, *a.spec(), 2, 99).unwrap();
        let input = Tensor::<f64>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let p = a.forward(&input).unwrap();
        let q = rewrapped.forward(&input).unwrap();
        let scale = p.max_abs();
        for (u, v) in p.data().iter().zip(q.data()) {
            assert!((u - v).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn param_count_arithmetic() {
        let spec = ConvSpec::same(64, 64, 3);
        assert_eq!(trainable_param_count(&spec, 2), 64 * 2 + 2 * 576);
        assert_eq!(trainable_param_count(&spec, 2), 1280);
        assert_eq!(trainable_param_count(&spec, 4), 2 * 1280);
        assert_eq!(full_param_count(&spec), 36_928);
    }
}
