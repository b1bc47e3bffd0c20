//! Batch normalization over `[N, C]` (per unit) or `[N, C, H, W]` (per channel).

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub channels: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Population statistics used in inference mode.
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Per-channel mean and biased variance of a batch, accumulated in `f64`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, c, spatial) = layout(x.shape())?;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(s * c + ch) * spatial..][..spatial];
            for &v in plane {
                let v = v.as_f64();
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let count = (n * spatial) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0))
        .collect();
    Ok((mean, var, n * spatial))
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Shape(format!(
            "batch norm expects [N, C] or [N, C, H, W], got {shape:?}"
        ))),
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let (n, c, spatial) = layout(x.shape())?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InsufficientBatch(n));
                }
                let (m, v, _) = channel_moments(x)?;
                (m, v)
            }
            Mode::Inference => (
                self.running_mean
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
                self.running_var.data().iter().map(|v| v.as_f64()).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                let g = self.gamma.data()[ch];
                let b = self.beta.data()[ch];
                let m = T::from_f64(mean[ch]);
                let is = T::from_f64(inv_std[ch]);
                for i in off..off + spatial {
                    let z = (x.data()[i] - m) * is;
                    normalized.data_mut()[i] = z;
                    out.data_mut()[i] = g * z + b;
                }
            }
        }
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<BatchNormGrads<T>> {
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::Shape(format!(
                "batch norm backward: upstream {:?} vs cached {:?}",
                grad_out.shape(),
                cache.normalized.shape()
            )));
        }
        let (n, c, spatial) = layout(grad_out.shape())?;
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                for i in off..off + spatial {
                    let g = grad_out.data()[i].as_f64();
                    dbeta[ch] += g;
                    dgamma[ch] += g * cache.normalized.data()[i].as_f64();
                }
            }
        }
        let m = (n * spatial) as f64;
        let mut dx = Tensor::zeros(grad_out.shape());
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                let scale = self.gamma.data()[ch].as_f64() * cache.inv_std[ch];
                for i in off..off + spatial {
                    let g = grad_out.data()[i].as_f64();
                    let v = match cache.mode {
                        Mode::Train => {
                            let xh = cache.normalized.data()[i].as_f64();
                            scale * (g - dbeta[ch] / m - xh * dgamma[ch] / m)
                        }
                        Mode::Inference => scale * g,
                    };
                    dx.data_mut()[i] = T::from_f64(v);
                }
            }
        }
        let to_t = |v: Vec<f64>| {
            Tensor::from_vec(&[c], v.into_iter().map(T::from_f64).collect()).expect("channels")
        };
        Ok(BatchNormGrads {
            input: dx,
            gamma: to_t(dgamma),
            beta: to_t(dbeta),
        })
    }
}
