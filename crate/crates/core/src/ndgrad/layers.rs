//! Stateful layers: thin wrappers around the ops that own parameters and
//! the activations needed for the backward pass.
//!
//! Train-mode forward passes take their input by value and stash whatever
//! backward needs; eval-mode forward is a pure function of the input and
//! the parameters, usable concurrently through `&self`.

use super::ops::{self, Act, BnCache, Padding, RunningStats};
use super::tensor::{Parameter, Tensor};
use crate::error::state_err;
use crate::rng::Rng;
use crate::Result;

pub struct Conv2d {
    pub name: String,
    pub kernel: Parameter,
    pub bias: Parameter,
    pub padding: Padding,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, kernel: Parameter, bias: Parameter, padding: Padding) -> Self {
        Conv2d {
            name: name.into(),
            kernel,
            bias,
            padding,
            input: None,
        }
    }
}

pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RunningStats,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            gamma: Parameter::new("gamma", Tensor::full(&[channels], 1.0).expect("const")),
            beta: Parameter::new("beta", Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }
}

pub struct Activation {
    pub kind: Act,
    output: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: Act) -> Self {
        Activation { kind, output: None }
    }
}

pub struct MaxPool2d {
    pub size: (usize, usize),
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(size: (usize, usize)) -> Self {
        MaxPool2d { size, cache: None }
    }
}

pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<u8>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }
}

pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { input_shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

/// Global max over the spatial dims: `[N,C,H,W] -> [N,C]`.
pub struct GlobalMaxPool {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl GlobalMaxPool {
    pub fn new() -> Self {
        GlobalMaxPool { cache: None }
    }
}

impl Default for GlobalMaxPool {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Dense {
    pub name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(name: impl Into<String>, weight: Parameter, bias: Parameter) -> Self {
        Dense {
            name: name.into(),
            weight,
            bias,
            input: None,
        }
    }
}

/// One node of a sequential model.
pub enum LayerNode {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Act(Activation),
    Pool(MaxPool2d),
    Drop(Dropout),
    Flatten(Flatten),
    GlobalMax(GlobalMaxPool),
    Dense(Dense),
}

fn accumulate(param: &mut Parameter, grad: &Tensor) {
    let g = param.tensor.grad_mut().expect("parameters always carry a gradient slot");
    for (a, b) in g.iter_mut().zip(grad.data()) {
        *a += b;
    }
}

fn flatten_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1..].iter().product()]
}

impl LayerNode {
    pub fn forward_train(&mut self, x: Tensor, rng: &mut Rng) -> Result<Tensor> {
        match self {
            LayerNode::Conv(l) => {
                let y = ops::conv2d(&x, &l.kernel.tensor, &l.bias.tensor, l.padding)?;
                l.input = Some(x);
                Ok(y)
            }
            LayerNode::Bn(l) => {
                let (y, cache) = ops::batchnorm_train(
                    &x,
                    &l.gamma.tensor,
                    &l.beta.tensor,
                    &mut l.stats,
                    l.momentum,
                    l.eps,
                )?;
                l.cache = Some(cache);
                Ok(y)
            }
            LayerNode::Act(l) => {
                let mut y = x;
                ops::activation_inplace(&mut y, l.kind);
                l.output = Some(y.clone());
                Ok(y)
            }
            LayerNode::Pool(l) => {
                let (y, arg) = ops::maxpool2d(&x, l.size)?;
                l.cache = Some((x.shape().to_vec(), arg));
                Ok(y)
            }
            LayerNode::Drop(l) => {
                let (y, mask) = ops::dropout_train(&x, l.rate, rng)?;
                l.mask = Some(mask);
                Ok(y)
            }
            LayerNode::Flatten(l) => {
                l.input_shape = Some(x.shape().to_vec());
                let new = flatten_shape(x.shape());
                x.reshaped(&new)
            }
            LayerNode::GlobalMax(l) => {
                let shape = x.shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (y, arg) = ops::maxpool2d(&x, (h, w))?;
                l.cache = Some((shape, arg));
                y.reshaped(&[n, c])
            }
            LayerNode::Dense(l) => {
                let y = ops::dense(&x, &l.weight.tensor, &l.bias.tensor)?;
                l.input = Some(x);
                Ok(y)
            }
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LayerNode::Conv(l) => ops::conv2d(x, &l.kernel.tensor, &l.bias.tensor, l.padding),
            LayerNode::Bn(l) => ops::batchnorm_eval(x, &l.gamma.tensor, &l.beta.tensor, &l.stats, l.eps),
            LayerNode::Act(l) => Ok(ops::activation(x, l.kind)),
            LayerNode::Pool(l) => Ok(ops::maxpool2d(x, l.size)?.0),
            LayerNode::Drop(_) => Ok(x.clone()),
            LayerNode::Flatten(_) => x.clone().reshaped(&flatten_shape(x.shape())),
            LayerNode::GlobalMax(_) => {
                let shape = x.shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                ops::maxpool2d(x, (h, w))?.0.reshaped(&[n, c])
            }
            LayerNode::Dense(l) => ops::dense(x, &l.weight.tensor, &l.bias.tensor),
        }
    }

    pub fn backward(&mut self, dy: Tensor) -> Result<Tensor> {
        let missing = || state_err("backward", "no cached forward pass");
        match self {
            LayerNode::Conv(l) => {
                let input = l.input.take().ok_or_else(missing)?;
                let (dx, dk, db) =
                    ops::conv2d_backward(&input, &l.kernel.tensor, &l.bias.tensor, l.padding, &dy)?;
                accumulate(&mut l.kernel, &dk);
                accumulate(&mut l.bias, &db);
                Ok(dx)
            }
            LayerNode::Bn(l) => {
                let cache = l.cache.take().ok_or_else(missing)?;
                let (dx, dg, db) = ops::batchnorm_backward(&cache, &l.gamma.tensor, &dy)?;
                accumulate(&mut l.gamma, &dg);
                accumulate(&mut l.beta, &db);
                Ok(dx)
            }
            LayerNode::Act(l) => {
                let output = l.output.take().ok_or_else(missing)?;
                ops::activation_backward(&output, l.kind, &dy)
            }
            LayerNode::Pool(l) => {
                let (shape, arg) = l.cache.take().ok_or_else(missing)?;
                ops::maxpool2d_backward(&shape, &arg, &dy)
            }
            LayerNode::Drop(l) => {
                let mask = l.mask.take().ok_or_else(missing)?;
                ops::dropout_backward(&mask, l.rate, &dy)
            }
            LayerNode::Flatten(l) => {
                let shape = l.input_shape.take().ok_or_else(missing)?;
                dy.reshaped(&shape)
            }
            LayerNode::GlobalMax(l) => {
                let (shape, arg) = l.cache.take().ok_or_else(missing)?;
                let (n, c) = (shape[0], shape[1]);
                let dy = dy.reshaped(&[n, c, 1, 1])?;
                ops::maxpool2d_backward(&shape, &arg, &dy)
            }
            LayerNode::Dense(l) => {
                let input = l.input.take().ok_or_else(missing)?;
                let (dx, dw, db) = ops::dense_backward(&input, &l.weight.tensor, &dy)?;
                accumulate(&mut l.weight, &dw);
                accumulate(&mut l.bias, &db);
                Ok(dx)
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            LayerNode::Conv(l) => vec![&l.kernel, &l.bias],
            LayerNode::Bn(l) => vec![&l.gamma, &l.beta],
            LayerNode::Dense(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            LayerNode::Conv(l) => vec![&mut l.kernel, &mut l.bias],
            LayerNode::Bn(l) => vec![&mut l.gamma, &mut l.beta],
            LayerNode::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    /// Named state blobs for checkpointing: parameters plus batch-norm
    /// running statistics.
    pub fn blobs(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        match self {
            LayerNode::Conv(l) => vec![
                (format!("{}.weight", l.name), l.kernel.tensor.shape().to_vec(), l.kernel.tensor.data().to_vec()),
                (format!("{}.bias", l.name), l.bias.tensor.shape().to_vec(), l.bias.tensor.data().to_vec()),
            ],
            LayerNode::Bn(l) => {
                let c = l.gamma.tensor.numel();
                vec![
                    (format!("{}.gamma", l.name), vec![c], l.gamma.tensor.data().to_vec()),
                    (format!("{}.beta", l.name), vec![c], l.beta.tensor.data().to_vec()),
                    (format!("{}.running_mean", l.name), vec![c], l.stats.mean.clone()),
                    (format!("{}.running_var", l.name), vec![c], l.stats.var.clone()),
                ]
            }
            LayerNode::Dense(l) => vec![
                (format!("{}.weight", l.name), l.weight.tensor.shape().to_vec(), l.weight.tensor.data().to_vec()),
                (format!("{}.bias", l.name), l.bias.tensor.shape().to_vec(), l.bias.tensor.data().to_vec()),
            ],
            _ => vec![],
        }
    }

    /// Restore one named blob; returns true when the name belongs to this
    /// layer. Shape mismatches are the caller's job to diagnose.
    pub fn restore_blob(&mut self, name: &str, data: &[f64]) -> bool {
        match self {
            LayerNode::Conv(l) => {
                if name == format!("{}.weight", l.name) {
                    l.kernel.tensor.data_mut().copy_from_slice(data);
                    true
                } else if name == format!("{}.bias", l.name) {
                    l.bias.tensor.data_mut().copy_from_slice(data);
                    true
                } else {
                    false
                }
            }
            LayerNode::Bn(l) => {
                if name == format!("{}.gamma", l.name) {
                    l.gamma.tensor.data_mut().copy_from_slice(data);
                } else if name == format!("{}.beta", l.name) {
                    l.beta.tensor.data_mut().copy_from_slice(data);
                } else if name == format!("{}.running_mean", l.name) {
                    l.stats.mean.copy_from_slice(data);
                } else if name == format!("{}.running_var", l.name) {
                    l.stats.var.copy_from_slice(data);
                } else {
                    return false;
                }
                true
            }
            LayerNode::Dense(l) => {
                if name == format!("{}.weight", l.name) {
                    l.weight.tensor.data_mut().copy_from_slice(data);
                    true
                } else if name == format!("{}.bias", l.name) {
                    l.bias.tensor.data_mut().copy_from_slice(data);
                    true
                } else {
                    false
                }
            }
            _ => false,
        }
    }
}
