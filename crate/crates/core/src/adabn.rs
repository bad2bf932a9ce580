//! Batch normalization with source-training, target-adaptation (AdaBN) and
//! frozen-evaluation modes.
//!
//! In `Train` and `Adapt` modes the layer normalizes with the statistics of
//! the current batch and folds them into its running statistics with an
//! exponential moving average. `Adapt` differs from `Train` only in that the
//! affine parameters never receive a gradient. `Eval` is a fixed affine map
//! built from the running statistics. `Accumulate` normalizes like `Adapt`
//! but sums exact statistics over a whole sweep, for full-pass AdaBN.
//!
//! Variances are biased (divide by `N·H·W`) everywhere, including the
//! running estimate.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Adapt,
    Eval,
    Accumulate,
}

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
struct StatSums {
    count: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    momentum: T,
    eps: T,
    mode: BnMode,
    source: Option<(Tensor<T>, Tensor<T>)>,
    sums: Option<StatSums>,
}

/// Forward state needed by [`BatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    mode: BnMode,
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [n, c, h, w] = x.dims4("batch_stats")?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let d = x.data();
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += d[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let mu = s / count;
        let mut ss = 0.0f64;
        for b in 0..n {
            ss += d[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|v| {
                    let e = v.as_f64() - mu;
                    e * e
                })
                .sum::<f64>();
        }
        mean.push(T::from_f64_lossy(mu));
        var.push(T::from_f64_lossy(ss / count));
    }
    Ok((mean, var))
}

impl<T: Scalar> BatchNorm<T> {
    /// γ = 1, β = 0, running mean 0 and variance 1, mode `Train`.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
            eps: T::from_f64_lossy(DEFAULT_EPS),
            mode: BnMode::Train,
            source: None,
            sums: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        self.set_momentum(momentum)?;
        Ok(self)
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} must lie in (0, 1]"
            )));
        }
        self.momentum = T::from_f64_lossy(momentum);
        Ok(())
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Switches mode. Entering `Accumulate` clears the sweep sums; leaving it
    /// commits them to the running statistics.
    pub fn set_mode(&mut self, mode: BnMode) {
        if self.mode == BnMode::Accumulate && mode != BnMode::Accumulate {
            self.commit_sums();
        }
        if mode == BnMode::Accumulate && self.mode != BnMode::Accumulate {
            let c = self.channels();
            self.sums = Some(StatSums {
                count: 0.0,
                sum: vec![0.0; c],
                sum_sq: vec![0.0; c],
            });
        }
        self.mode = mode;
    }

    pub fn running_mean(&self) -> &Tensor<T> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor<T> {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        let c = [self.channels()];
        if mean.shape() != c || var.shape() != c {
            return shape_err(
                "BatchNorm::set_running_stats",
                format!("expected [{}], got {:?} / {:?}", c[0], mean.shape(), var.shape()),
            );
        }
        if var.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument("running variance must be >= 0".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Stores the current running statistics as the source snapshot.
    pub fn snapshot_source(&mut self) {
        self.source = Some((self.running_mean.clone(), self.running_var.clone()));
    }

    pub fn source_snapshot(&self) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.source.as_ref()
    }

    pub fn set_source_snapshot(&mut self, mean: Tensor<T>, var: Tensor<T>) {
        self.source = Some((mean, var));
    }

    /// Restores the running statistics to the source snapshot.
    pub fn reset_stats(&mut self) -> Result<()> {
        let (mean, var) = self
            .source
            .clone()
            .ok_or_else(|| Error::InvalidArgument("no source statistics snapshot stored".into()))?;
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Dispatches on the current mode.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        match self.mode {
            BnMode::Train => self.forward_train(x),
            BnMode::Adapt => self.forward_adapt(x),
            BnMode::Accumulate => self.forward_accumulate(x),
            BnMode::Eval => self.forward_eval(x),
        }
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x, "BatchNorm::forward_train")?;
        let (mean, var) = batch_stats(x)?;
        self.update_running(&mean, &var);
        self.normalize(x, &mean, &var, true, BnMode::Train)
    }

    /// AdaBN: same computation as [`Self::forward_train`] on target data; γ and β
    /// receive no gradient. Requires at least two samples per batch.
    pub fn forward_adapt(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x, "BatchNorm::forward_adapt")?;
        if x.shape()[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "adaptation batches need at least 2 samples, got {}",
                x.shape()[0]
            )));
        }
        let (mean, var) = batch_stats(x)?;
        self.update_running(&mean, &var);
        self.normalize(x, &mean, &var, true, BnMode::Adapt)
    }

    fn forward_accumulate(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x, "BatchNorm::forward_accumulate")?;
        let (mean, var) = batch_stats(x)?;
        let [n, _, h, w] = x.dims4("BatchNorm")?;
        let count = (n * h * w) as f64;
        let sums = self.sums.as_mut().expect("accumulate mode initialises sums");
        for ch in 0..mean.len() {
            let mu = mean[ch].as_f64();
            sums.sum[ch] += mu * count;
            sums.sum_sq[ch] += (var[ch].as_f64() + mu * mu) * count;
        }
        sums.count += count;
        self.normalize(x, &mean, &var, true, BnMode::Accumulate)
    }

    /// Fixed affine map from the running statistics; no state changes.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x, "BatchNorm::forward_eval")?;
        let mean = self.running_mean.data().to_vec();
        let var = self.running_var.data().to_vec();
        self.normalize(x, &mean, &var, false, BnMode::Eval)
    }

    /// Gradient w.r.t. the input, plus `(dγ, dβ)` when `want_affine` and the
    /// forward pass ran in `Train` or `Eval` mode. Adaptation passes never
    /// produce affine gradients.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_out: &Tensor<T>,
        want_affine: bool,
    ) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
        grad_out.expect_same_shape(&cache.x_hat, "BatchNorm::backward")?;
        let [n, c, h, w] = grad_out.dims4("BatchNorm::backward")?;
        let plane = h * w;
        let m = T::from_usize(n * plane).expect("count");
        let g = grad_out.data();
        let xh = cache.x_hat.data();
        let mut dx = vec![T::zero(); g.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let gamma = self.gamma.data()[ch];
            let inv = cache.inv_std[ch];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (&gv, &xv) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_g += gv;
                    sum_gx += gv * xv;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    dx[i] = if cache.batch_stats {
                        gamma * inv * (g[i] - sum_g / m - xh[i] * sum_gx / m)
                    } else {
                        gamma * inv * g[i]
                    };
                }
            }
        }
        let dx = Tensor::new(grad_out.shape().to_vec(), dx)?;
        dx.ensure_finite("BatchNorm::backward")?;
        let affine = matches!(cache.mode, BnMode::Train | BnMode::Eval) && want_affine;
        let affine = affine.then(|| (Tensor::new(vec![c], dgamma).unwrap(), Tensor::new(vec![c], dbeta).unwrap()));
        Ok((dx, affine))
    }

    fn check(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        let [_, c, _, _] = x.dims4(op)?;
        if c != self.channels() {
            return shape_err(op, format!("input has {c} channels, layer has {}", self.channels()));
        }
        Ok(())
    }

    fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
    }

    fn commit_sums(&mut self) {
        if let Some(s) = self.sums.take() {
            if s.count > 0.0 {
                for ch in 0..s.sum.len() {
                    let mu = s.sum[ch] / s.count;
                    let var = (s.sum_sq[ch] / s.count - mu * mu).max(0.0);
                    self.running_mean.data_mut()[ch] = T::from_f64_lossy(mu);
                    self.running_var.data_mut()[ch] = T::from_f64_lossy(var);
                }
            }
        }
    }

    fn normalize(
        &self,
        x: &Tensor<T>,
        mean: &[T],
        var: &[T],
        batch_stats: bool,
        mode: BnMode,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        let [n, c, h, w] = x.dims4("BatchNorm")?;
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let d = x.data();
        let mut x_hat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        for b in 0..n {
            for ch in 0..c {
                let (mu, inv) = (mean[ch], inv_std[ch]);
                let (gamma, beta) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (d[i] - mu) * inv;
                    x_hat[i] = xh;
                    out[i] = gamma * xh + beta;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        out.ensure_finite("BatchNorm::forward")?;
        Ok((
            out,
            BnCache {
                x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
                inv_std,
                batch_stats,
                mode,
            },
        ))
    }
}
