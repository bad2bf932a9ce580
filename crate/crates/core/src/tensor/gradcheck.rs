use super::Tensor;

/// Per-tensor comparison of analytic gradients against central differences.
///
/// The error of a tensor is `max_i |a_i − n_i| / max_i max(|a_i|, |n_i|)`,
/// i.e. the max-norm of the difference relative to the max-norm of the
/// gradient. When both gradients stay below [`ZERO_FLOOR`] in max-norm the
/// tensor's gradient is zero up to rounding and the absolute difference is
/// reported instead.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub per_tensor: Vec<f64>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() <= tolerance
    }
}

pub const ZERO_FLOOR: f64 = 1e-8;

/// Central-difference check of `analytic` against `f` at `params`.
///
/// `params` is perturbed in place one scalar at a time and restored exactly.
pub fn gradcheck<F>(
    mut f: F,
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
) -> GradcheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut numeric_all = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        assert_eq!(params[t].shape(), analytic[t].shape(), "gradient shape");
        let mut numeric = Tensor::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            params[t].data_mut()[i] = orig + step;
            let plus = f(params);
            params[t].data_mut()[i] = orig - step;
            let minus = f(params);
            params[t].data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        let scale = numeric.max_abs().max(analytic[t].max_abs());
        let diff = numeric
            .data()
            .iter()
            .zip(analytic[t].data())
            .map(|(n, a)| (n - a).abs())
            .fold(0.0, f64::max);
        per_tensor.push(if scale < ZERO_FLOOR { diff } else { diff / scale });
        numeric_all.push(numeric);
    }
    GradcheckReport {
        per_tensor,
        numeric: numeric_all,
    }
}
