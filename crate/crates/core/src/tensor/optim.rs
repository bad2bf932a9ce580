use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return shape_err(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, state {:?} must agree",
                param.shape(),
                grad.shape(),
                state.m.shape()
            ),
        );
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let one = T::one();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.ensure_finite("adam_step")
}

/// Adam over a set of named parameters. State is created lazily, so only
/// parameters that actually receive a gradient ever own optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            config: AdamConfig::default(),
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(param.shape()));
        adam_step(param, grad, state, self.lr, &self.config)
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.states.keys().map(String::as_str)
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.states.get(name)
    }
}
