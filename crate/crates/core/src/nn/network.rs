//! The signature CNN: a convolutional trunk ending at FC7 (the feature layer)
//! feeding a softmax user head and an optional sigmoid forgery head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{relu, relu_backward, sigmoid, softmax};
use crate::nn::batchnorm::{BatchNorm, BatchNormCache};
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::pool::MaxPool2d;
use crate::nn::{LayerSpec, Mode};
use crate::tensor::{Scalar, Tensor};

/// Filter and unit counts of the five conv and two FC layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignetWidths {
    pub conv: [usize; 5],
    pub fc: [usize; 2],
}

impl Default for SignetWidths {
    fn default() -> Self {
        SignetWidths {
            conv: [96, 256, 384, 384, 256],
            fc: [2048, 2048],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Width of the softmax head; `None` drops the head.
    pub user_classes: Option<usize>,
    pub forgery_head: bool,
}

impl Architecture {
    /// The five-conv, two-FC stack with batch norm and ReLU after every
    /// learnable trunk layer, on 1x150x220 inputs.
    pub fn signet(widths: SignetWidths, user_classes: Option<usize>, forgery_head: bool) -> Self {
        use LayerSpec::*;
        let [c1, c2, c3, c4, c5] = widths.conv;
        let conv = |filters, kernel, stride, pad| Conv {
            filters,
            kernel,
            stride,
            pad,
        };
        let pool = MaxPool { size: 3, stride: 2 };
        let mut layers = Vec::new();
        let learnable = |layers: &mut Vec<LayerSpec>, spec| {
            layers.extend([spec, BatchNorm, Relu]);
        };
        learnable(&mut layers, conv(c1, 11, 4, 0));
        layers.push(pool);
        learnable(&mut layers, conv(c2, 5, 1, 2));
        layers.push(pool);
        learnable(&mut layers, conv(c3, 3, 1, 1));
        learnable(&mut layers, conv(c4, 3, 1, 1));
        learnable(&mut layers, conv(c5, 3, 1, 1));
        layers.push(pool);
        learnable(
            &mut layers,
            FullyConnected {
                units: widths.fc[0],
            },
        );
        learnable(
            &mut layers,
            FullyConnected {
                units: widths.fc[1],
            },
        );
        Architecture {
            input: [1, 150, 220],
            layers,
            user_classes,
            forgery_head,
        }
    }

    /// Per-sample shapes: the input, then the output of every conv, pool and
    /// fully connected layer in order.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        let mut chain = vec![shape.clone()];
        for spec in &self.layers {
            shape = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    let conv = Conv2d::<f32> {
                        in_channels: shape[0],
                        out_channels: filters,
                        kernel,
                        stride,
                        pad,
                        weight: Tensor::zeros(&[0]),
                        bias: None,
                    };
                    let mut s = vec![1];
                    s.extend_from_slice(&shape);
                    conv.output_shape(&s)?[1..].to_vec()
                }
                LayerSpec::MaxPool { size, stride } => {
                    let mut s = vec![1];
                    s.extend_from_slice(&shape);
                    MaxPool2d { size, stride }.output_shape(&s)?[1..].to_vec()
                }
                LayerSpec::FullyConnected { units } => vec![units],
                LayerSpec::BatchNorm | LayerSpec::Relu => continue,
            };
            chain.push(shape.clone());
        }
        Ok(chain)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self
            .shape_chain()?
            .last()
            .map(|s| s.iter().product())
            .unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_classes.is_none() && !self.forgery_head {
            return Err(Error::Config(
                "network needs at least one output head".into(),
            ));
        }
        if matches!(self.user_classes, Some(m) if m < 2) {
            return Err(Error::Config("user head needs at least 2 classes".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        for spec in &self.layers {
            let ok = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    ..
                } => filters > 0 && kernel > 0 && stride > 0,
                LayerSpec::MaxPool { size, stride } => size > 0 && stride > 0,
                LayerSpec::FullyConnected { units } => units > 0,
                _ => true,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "non-positive hyperparameter in {spec:?}"
                )));
            }
        }
        self.shape_chain().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    MaxPool(MaxPool2d),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug)]
pub struct NetworkOutput<T = f32> {
    /// `[N, M]`
    pub user_logits: Option<Tensor<T>>,
    /// `[N, M]`, rows on the probability simplex.
    pub p_user: Option<Tensor<T>>,
    /// `[N, 1]`
    pub forgery_logit: Option<Tensor<T>>,
    /// `[N, 1]`, in `[0, 1]`.
    pub p_forgery: Option<Tensor<T>>,
    /// `[N, D]` FC7 activations.
    pub phi: Tensor<T>,
}

#[derive(Clone, Debug)]
enum LayerCache<T> {
    Conv(Tensor<T>),
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Linear {
        input: Tensor<T>,
        input_shape: Vec<usize>,
    },
    BatchNorm(BatchNormCache<T>),
    Relu(Tensor<T>),
}

/// Cached intermediates of a forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    caches: Vec<LayerCache<T>>,
    phi: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    /// Discrete state of the piecewise layers (ReLU signs, pooling argmax).
    /// Two passes with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for cache in &self.caches {
            match cache {
                LayerCache::Relu(x) => {
                    out.extend(x.data().iter().map(|&v| usize::from(v > T::zero())))
                }
                LayerCache::Pool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }
}

pub struct Gradients<T> {
    /// Aligned with [`Network::params`].
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    pub arch: Architecture,
    pub layers: Vec<Layer<T>>,
    pub user_head: Option<Linear<T>>,
    pub forgery_head: Option<Linear<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds the layer stack with zero weights, unit BN scale and unit
    /// population variance. Learnable layers directly followed by batch norm
    /// carry no bias.
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut shape = arch.input.to_vec();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let feeds_bn = matches!(arch.layers.get(i + 1), Some(LayerSpec::BatchNorm));
            let layer = match *spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    let conv = Conv2d::new(shape[0], filters, kernel, stride, pad, !feeds_bn);
                    let mut s = vec![1];
                    s.extend_from_slice(&shape);
                    shape = conv.output_shape(&s)?[1..].to_vec();
                    Layer::Conv(conv)
                }
                LayerSpec::MaxPool { size, stride } => {
                    let pool = MaxPool2d { size, stride };
                    let mut s = vec![1];
                    s.extend_from_slice(&shape);
                    shape = pool.output_shape(&s)?[1..].to_vec();
                    Layer::MaxPool(pool)
                }
                LayerSpec::FullyConnected { units } => {
                    let fc = Linear::new(shape.iter().product(), units, !feeds_bn);
                    shape = vec![units];
                    Layer::Linear(fc)
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape[0])),
                LayerSpec::Relu => Layer::Relu,
            };
            layers.push(layer);
        }
        let dim: usize = shape.iter().product();
        Ok(Network {
            user_head: arch.user_classes.map(|m| Linear::new(dim, m, true)),
            forgery_head: arch.forgery_head.then(|| Linear::new(dim, 1, true)),
            arch,
            layers,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.user_head
            .as_ref()
            .or(self.forgery_head.as_ref())
            .map(|h| h.in_features)
            .unwrap_or(0)
    }

    pub fn params(&self) -> Vec<(&Tensor<T>, ParamKind)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push((&c.weight, ParamKind::Weight));
                    if let Some(b) = &c.bias {
                        out.push((b, ParamKind::Bias));
                    }
                }
                Layer::Linear(fc) => {
                    out.push((&fc.weight, ParamKind::Weight));
                    if let Some(b) = &fc.bias {
                        out.push((b, ParamKind::Bias));
                    }
                }
                Layer::BatchNorm(bn) => {
                    out.push((&bn.gamma, ParamKind::Gamma));
                    out.push((&bn.beta, ParamKind::Beta));
                }
                Layer::MaxPool(_) | Layer::Relu => {}
            }
        }
        for fc in self.user_head.iter().chain(self.forgery_head.iter()) {
            out.push((&fc.weight, ParamKind::Weight));
            if let Some(b) = &fc.bias {
                out.push((b, ParamKind::Bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor<T>, ParamKind)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push((&mut c.weight, ParamKind::Weight));
                    if let Some(b) = &mut c.bias {
                        out.push((b, ParamKind::Bias));
                    }
                }
                Layer::Linear(fc) => {
                    out.push((&mut fc.weight, ParamKind::Weight));
                    if let Some(b) = &mut fc.bias {
                        out.push((b, ParamKind::Bias));
                    }
                }
                Layer::BatchNorm(bn) => {
                    out.push((&mut bn.gamma, ParamKind::Gamma));
                    out.push((&mut bn.beta, ParamKind::Beta));
                }
                Layer::MaxPool(_) | Layer::Relu => {}
            }
        }
        for fc in self
            .user_head
            .iter_mut()
            .chain(self.forgery_head.iter_mut())
        {
            out.push((&mut fc.weight, ParamKind::Weight));
            if let Some(b) = &mut fc.bias {
                out.push((b, ParamKind::Bias));
            }
        }
        out
    }

    /// Number of learnable scalars (population statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(t, _)| t.len()).sum()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = (usize, &BatchNorm<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::BatchNorm(bn) => Some((i, bn)),
            _ => None,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.arch.input {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {}, {}], got {:?}",
                self.arch.input[0],
                self.arch.input[1],
                self.arch.input[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs trunk layers `[0, end)` and returns their output.
    pub fn forward_prefix(&self, x: &Tensor<T>, end: usize, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers[..end] {
            h = self.apply(layer, h, mode, None)?;
        }
        Ok(h)
    }

    fn apply(
        &self,
        layer: &Layer<T>,
        h: Tensor<T>,
        mode: Mode,
        caches: Option<&mut Vec<LayerCache<T>>>,
    ) -> Result<Tensor<T>> {
        Ok(match layer {
            Layer::Conv(conv) => {
                let y = conv.forward(&h)?;
                if let Some(c) = caches {
                    c.push(LayerCache::Conv(h));
                }
                y
            }
            Layer::MaxPool(pool) => {
                let (y, argmax) = pool.forward(&h)?;
                if let Some(c) = caches {
                    c.push(LayerCache::Pool {
                        input_shape: h.shape().to_vec(),
                        argmax,
                    });
                }
                y
            }
            Layer::Linear(fc) => {
                let input_shape = h.shape().to_vec();
                let n = h.batch();
                let flat_len = h.sample_len();
                let flat = h.reshape(&[n, flat_len])?;
                let y = fc.forward(&flat)?;
                if let Some(c) = caches {
                    c.push(LayerCache::Linear {
                        input: flat,
                        input_shape,
                    });
                }
                y
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(&h, mode)?;
                if let Some(c) = caches {
                    c.push(LayerCache::BatchNorm(cache));
                }
                y
            }
            Layer::Relu => {
                let y = relu(&h);
                if let Some(c) = caches {
                    c.push(LayerCache::Relu(h));
                }
                y
            }
        })
    }

    fn heads(&self, phi: Tensor<T>) -> Result<NetworkOutput<T>> {
        let (user_logits, p_user) = match &self.user_head {
            Some(head) => {
                let z = head.forward(&phi)?;
                let p = softmax(&z);
                (Some(z), Some(p))
            }
            None => (None, None),
        };
        let (forgery_logit, p_forgery) = match &self.forgery_head {
            Some(head) => {
                let z = head.forward(&phi)?;
                let p = sigmoid(&z);
                (Some(z), Some(p))
            }
            None => (None, None),
        };
        Ok(NetworkOutput {
            user_logits,
            p_user,
            forgery_logit,
            p_forgery,
            phi,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<NetworkOutput<T>> {
        let phi = self.forward_prefix(x, self.layers.len(), mode)?;
        self.heads(phi)
    }

    /// Forward pass keeping every intermediate needed for backpropagation.
    pub fn forward_traced(
        &self,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(NetworkOutput<T>, Trace<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.apply(layer, h, mode, Some(&mut caches))?;
        }
        let out = self.heads(h.clone())?;
        Ok((out, Trace { caches, phi: h }))
    }

    /// Backpropagates gradients w.r.t. the head logits (`[N, M]` and `[N, 1]`)
    /// through the whole network.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_user_logits: Option<&Tensor<T>>,
        grad_forgery_logit: Option<&Tensor<T>>,
    ) -> Result<Gradients<T>> {
        let mut grad = Tensor::zeros(trace.phi.shape());
        let mut head_grads = Vec::new();
        let heads = [
            (self.user_head.as_ref(), grad_user_logits),
            (self.forgery_head.as_ref(), grad_forgery_logit),
        ];
        for (head, upstream) in heads {
            let Some(head) = head else { continue };
            let g = match upstream {
                Some(g) => head.backward(&trace.phi, g)?,
                None => head.backward(
                    &trace.phi,
                    &Tensor::zeros(&[trace.phi.batch(), head.out_features]),
                )?,
            };
            grad.add_assign(&g.input);
            head_grads.push(g.weight);
            head_grads.extend(g.bias);
        }

        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            let mut pg = Vec::new();
            grad = match (layer, cache) {
                (Layer::Conv(conv), LayerCache::Conv(input)) => {
                    let g = conv.backward(input, &grad)?;
                    pg.push(g.weight);
                    pg.extend(g.bias);
                    g.input
                }
                (
                    Layer::MaxPool(pool),
                    LayerCache::Pool {
                        input_shape,
                        argmax,
                    },
                ) => pool.backward(input_shape, argmax, &grad)?,
                (Layer::Linear(fc), LayerCache::Linear { input, input_shape }) => {
                    let g = fc.backward(input, &grad)?;
                    pg.push(g.weight);
                    pg.extend(g.bias);
                    g.input.reshape(input_shape)?
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(cache)) => {
                    let g = bn.backward(cache, &grad)?;
                    pg.push(g.gamma);
                    pg.push(g.beta);
                    g.input
                }
                (Layer::Relu, LayerCache::Relu(input)) => relu_backward(&grad, input),
                _ => return Err(Error::Shape("trace does not match network layers".into())),
            };
            per_layer.push(pg);
        }
        let mut params: Vec<Tensor<T>> = per_layer.into_iter().rev().flatten().collect();
        params.extend(head_grads);
        Ok(Gradients {
            params,
            input: grad,
        })
    }

    /// Same network with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let linear = |fc: &Linear<T>| Linear {
            in_features: fc.in_features,
            out_features: fc.out_features,
            weight: fc.weight.cast(),
            bias: fc.bias.as_ref().map(|b| b.cast()),
        };
        Network {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(Conv2d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        pad: c.pad,
                        weight: c.weight.cast(),
                        bias: c.bias.as_ref().map(|b| b.cast()),
                    }),
                    Layer::MaxPool(p) => Layer::MaxPool(*p),
                    Layer::Linear(fc) => Layer::Linear(linear(fc)),
                    Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                        channels: bn.channels,
                        gamma: bn.gamma.cast(),
                        beta: bn.beta.cast(),
                        running_mean: bn.running_mean.cast(),
                        running_var: bn.running_var.cast(),
                        eps: bn.eps,
                    }),
                    Layer::Relu => Layer::Relu,
                })
                .collect(),
            user_head: self.user_head.as_ref().map(linear),
            forgery_head: self.forgery_head.as_ref().map(linear),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(m: Option<usize>, forgery: bool) -> Architecture {
        Architecture {
            input: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv {
                    filters: 2,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::FullyConnected { units: 5 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
            ],
            user_classes: m,
            forgery_head: forgery,
        }
    }

    #[test]
    fn full_architecture_shape_chain() {
        let arch = Architecture::signet(SignetWidths::default(), Some(531), true);
        let chain = arch.shape_chain().unwrap();
        let want: Vec<Vec<usize>> = vec![
            vec![1, 150, 220],
            vec![96, 35, 53],
            vec![96, 17, 26],
            vec![256, 17, 26],
            vec![256, 8, 12],
            vec![384, 8, 12],
            vec![384, 8, 12],
            vec![256, 8, 12],
            vec![256, 3, 5],
            vec![2048],
            vec![2048],
        ];
        assert_eq!(chain, want);
        assert_eq!(arch.feature_dim().unwrap(), 2048);
    }

    #[test]
    fn head_rules() {
        assert!(Network::<f32>::new(tiny_arch(None, false)).is_err());
        assert!(Network::<f32>::new(tiny_arch(Some(1), false)).is_err());
        assert!(Network::<f32>::new(tiny_arch(None, true)).is_ok());
    }

    #[test]
    fn layers_before_bn_have_no_bias() {
        let net = Network::<f32>::new(tiny_arch(Some(3), true)).unwrap();
        let kinds: Vec<ParamKind> = net.params().iter().map(|(_, k)| *k).collect();
        use ParamKind::*;
        assert_eq!(
            kinds,
            vec![Weight, Gamma, Beta, Weight, Gamma, Beta, Weight, Bias, Weight, Bias]
        );
    }

    #[test]
    fn output_shapes_and_simplex() {
        let mut net = Network::<f64>::new(tiny_arch(Some(3), true)).unwrap();
        for (i, (p, _)) in net.params_mut().into_iter().enumerate() {
            for (j, v) in p.data_mut().iter_mut().enumerate() {
                *v += ((i * 31 + j) as f64 * 0.37).sin() * 0.5;
            }
        }
        let x = Tensor::from_vec(
            &[4, 1, 8, 8],
            (0..256).map(|i| (i as f64 * 0.13).cos()).collect(),
        )
        .unwrap();
        let out = net.forward(&x, Mode::Train).unwrap();
        let p = out.p_user.unwrap();
        assert_eq!(p.shape(), &[4, 3]);
        assert_eq!(out.p_forgery.as_ref().unwrap().shape(), &[4, 1]);
        assert_eq!(out.phi.shape(), &[4, 5]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let a = net.forward(&x, Mode::Inference).unwrap();
        let b = net.forward(&x, Mode::Inference).unwrap();
        assert_eq!(a.phi, b.phi);
    }
}
