use std::collections::BTreeMap;

use rand::Rng;

use crate::adabn::{BatchNorm, BnCache, BnMode};
use crate::convlora::ConvLoraAdapter;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward_opt, conv2d_forward, relu, relu_backward, ConvSpec, Scalar, Tensor};

/// Gradients keyed by parameter path.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

/// A parameter tensor with its freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            value,
            trainable: false,
        }
    }
}

/// Read-only view of one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a, T: Scalar> {
    pub value: &'a Tensor<T>,
    pub trainable: bool,
}

/// A plain convolution or one wrapped by a low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer<T: Scalar> {
    Plain {
        spec: ConvSpec,
        kernel: Param<T>,
        bias: Param<T>,
    },
    Lora {
        adapter: ConvLoraAdapter<T>,
        x_trainable: bool,
        y_trainable: bool,
    },
}

impl<T: Scalar> ConvLayer<T> {
    /// He-normal kernel (`std = √(2 / fan_in)`), zero bias.
    pub fn he_init<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.patch_len() as f64;
        ConvLayer::Plain {
            spec,
            kernel: Param::new(Tensor::randn(&spec.kernel_shape(), (2.0 / fan_in).sqrt(), rng)),
            bias: Param::new(Tensor::zeros(&[spec.out_channels])),
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        match self {
            ConvLayer::Plain { spec, .. } => spec,
            ConvLayer::Lora { adapter, .. } => adapter.spec(),
        }
    }

    pub fn is_lora(&self) -> bool {
        matches!(self, ConvLayer::Lora { .. })
    }

    pub fn adapter(&self) -> Option<&ConvLoraAdapter<T>> {
        match self {
            ConvLayer::Lora { adapter, .. } => Some(adapter),
            ConvLayer::Plain { .. } => None,
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut ConvLoraAdapter<T>> {
        match self {
            ConvLayer::Lora { adapter, .. } => Some(adapter),
            ConvLayer::Plain { .. } => None,
        }
    }

    /// Replaces a plain convolution by an adapter around its weights.
    pub fn inject(&mut self, rank: usize, seed: u64, path: &str) -> Result<()> {
        let ConvLayer::Plain { spec, kernel, bias } = self else {
            return Err(Error::InvalidArgument(format!("{path} already carries an adapter")));
        };
        let adapter = ConvLoraAdapter::init(kernel.value.clone(), bias.value.clone(), *spec, rank, seed)?;
        *self = ConvLayer::Lora {
            adapter,
            x_trainable: false,
            y_trainable: false,
        };
        Ok(())
    }

    /// Folds an adapter back into a plain convolution.
    pub fn merge(&mut self) {
        if let ConvLayer::Lora { adapter, .. } = self {
            let (kernel, bias) = adapter.merge();
            *self = ConvLayer::Plain {
                spec: *adapter.spec(),
                kernel: Param::new(kernel),
                bias: Param::new(bias),
            };
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            ConvLayer::Plain { spec, kernel, bias } => conv2d_forward(x, &kernel.value, &bias.value, spec),
            ConvLayer::Lora { adapter, .. } => adapter.forward(x),
        }
    }

    fn wants_params(&self) -> bool {
        match self {
            ConvLayer::Plain { kernel, bias, .. } => kernel.trainable || bias.trainable,
            ConvLayer::Lora {
                x_trainable,
                y_trainable,
                ..
            } => *x_trainable || *y_trainable,
        }
    }

    /// Accumulates gradients of trainable parameters into `grads` and returns
    /// the input gradient when requested.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_input: bool,
        path: &str,
        grads: &mut Grads<T>,
    ) -> Result<Option<Tensor<T>>> {
        let want_params = self.wants_params();
        if !want_params && !want_input {
            return Ok(None);
        }
        match self {
            ConvLayer::Plain { spec, kernel, bias } => {
                let g = conv2d_backward_opt(grad_out, input, &kernel.value, spec, want_input, want_params)?;
                if kernel.trainable {
                    accumulate(grads, format!("{path}.kernel"), g.kernel.clone().expect("requested"))?;
                }
                if bias.trainable {
                    accumulate(grads, format!("{path}.bias"), g.bias.clone().expect("requested"))?;
                }
                Ok(g.input)
            }
            ConvLayer::Lora {
                adapter,
                x_trainable,
                y_trainable,
            } => {
                if !want_params {
                    let (merged, _) = adapter.merge();
                    let g = conv2d_backward_opt(grad_out, input, &merged, adapter.spec(), true, false)?;
                    return Ok(g.input);
                }
                let g = adapter.backward(input, grad_out, want_input)?;
                if *x_trainable {
                    accumulate(grads, format!("{path}.lora_x"), g.x)?;
                }
                if *y_trainable {
                    accumulate(grads, format!("{path}.lora_y"), g.y)?;
                }
                Ok(g.input)
            }
        }
    }

    pub fn visit(&self, path: &str, f: &mut dyn FnMut(&str, ParamView<'_, T>)) {
        match self {
            ConvLayer::Plain { kernel, bias, .. } => {
                f(&format!("{path}.kernel"), view(kernel));
                f(&format!("{path}.bias"), view(bias));
            }
            ConvLayer::Lora {
                adapter,
                x_trainable,
                y_trainable,
            } => {
                let frozen = |value| ParamView {
                    value,
                    trainable: false,
                };
                f(&format!("{path}.kernel"), frozen(adapter.frozen_kernel()));
                f(&format!("{path}.bias"), frozen(adapter.frozen_bias()));
                f(
                    &format!("{path}.lora_x"),
                    ParamView {
                        value: &adapter.x,
                        trainable: *x_trainable,
                    },
                );
                f(
                    &format!("{path}.lora_y"),
                    ParamView {
                        value: &adapter.y,
                        trainable: *y_trainable,
                    },
                );
            }
        }
    }

    /// Visits the tensors a training step may update, with their flags.
    /// Frozen adapter kernels are never exposed mutably.
    pub fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, &mut bool)) {
        match self {
            ConvLayer::Plain { kernel, bias, .. } => {
                f(&format!("{path}.kernel"), &mut kernel.value, &mut kernel.trainable);
                f(&format!("{path}.bias"), &mut bias.value, &mut bias.trainable);
            }
            ConvLayer::Lora {
                adapter,
                x_trainable,
                y_trainable,
            } => {
                f(&format!("{path}.lora_x"), &mut adapter.x, x_trainable);
                f(&format!("{path}.lora_y"), &mut adapter.y, y_trainable);
            }
        }
    }
}

fn view<T: Scalar>(p: &Param<T>) -> ParamView<'_, T> {
    ParamView {
        value: &p.value,
        trainable: p.trainable,
    }
}

pub(crate) fn accumulate<T: Scalar>(grads: &mut Grads<T>, name: String, g: Tensor<T>) -> Result<()> {
    match grads.get_mut(&name) {
        Some(existing) => existing.add_assign(&g),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu<T: Scalar> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNorm<T>,
    pub gamma_trainable: bool,
    pub beta_trainable: bool,
}

#[derive(Debug, Clone)]
pub struct UnitCache<T: Scalar> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            conv: ConvLayer::he_init(ConvSpec::same(in_channels, out_channels, 3), rng),
            bn: BatchNorm::new(out_channels),
            gamma_trainable: false,
            beta_trainable: false,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, UnitCache<T>)> {
        let z = self.conv.forward(x)?;
        let (n, bn) = self.bn.forward(&z)?;
        let output = relu(&n);
        Ok((
            output.clone(),
            UnitCache {
                input: x.clone(),
                bn,
                output,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &UnitCache<T>,
        grad_out: &Tensor<T>,
        want_input: bool,
        path: &str,
        grads: &mut Grads<T>,
    ) -> Result<Option<Tensor<T>>> {
        let g = relu_backward(grad_out, &cache.output)?;
        let want_affine = self.gamma_trainable || self.beta_trainable;
        let (g, affine) = self.bn.backward(&cache.bn, &g, want_affine)?;
        if let Some((dg, db)) = affine {
            if self.gamma_trainable {
                accumulate(grads, format!("{path}.bn.gamma"), dg)?;
            }
            if self.beta_trainable {
                accumulate(grads, format!("{path}.bn.beta"), db)?;
            }
        }
        self.conv
            .backward(&cache.input, &g, want_input, &format!("{path}.conv"), grads)
    }

    pub fn visit(&self, path: &str, f: &mut dyn FnMut(&str, ParamView<'_, T>)) {
        self.conv.visit(&format!("{path}.conv"), f);
        f(
            &format!("{path}.bn.gamma"),
            ParamView {
                value: &self.bn.gamma,
                trainable: self.gamma_trainable,
            },
        );
        f(
            &format!("{path}.bn.beta"),
            ParamView {
                value: &self.bn.beta,
                trainable: self.beta_trainable,
            },
        );
    }

    pub fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, &mut bool)) {
        self.conv.visit_mut(&format!("{path}.conv"), f);
        f(&format!("{path}.bn.gamma"), &mut self.bn.gamma, &mut self.gamma_trainable);
        f(&format!("{path}.bn.beta"), &mut self.bn.beta, &mut self.beta_trainable);
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn.set_mode(mode);
    }
}
