//! 2-D convolution (cross-correlation, no kernel flip) lowered to GEMM via im2col.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_channels, in_channels, kernel, kernel]`
    pub weight: Tensor<T>,
    /// `[out_channels]`; absent when the layer feeds a batch norm.
    pub bias: Option<Tensor<T>>,
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Output extent of a sliding window: `floor((n + 2 pad - k) / stride) + 1`.
pub fn window_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: with_bias.then(|| Tensor::zeros(&[out_channels])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects [N, {}, H, W], got {:?}",
                self.in_channels, input
            )));
        }
        let oh = window_out(input[2], self.kernel, self.stride, self.pad);
        let ow = window_out(input[3], self.kernel, self.stride, self.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(vec![input[0], self.out_channels, oh, ow]),
            _ => Err(Error::Shape(format!(
                "{}x{} input smaller than {}x{} kernel with pad {}",
                input[2], input[3], self.kernel, self.kernel, self.pad
            ))),
        }
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.pad as isize;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            *d = if ix < 0 || ix >= w as isize {
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

    fn col2im(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.pad as isize;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let rows = self.fan_in();
        let p = oh * ow;
        let mut col = vec![T::zero(); rows * p];
        let mut out = Tensor::zeros(&out_shape);
        let out_len = self.out_channels * p;
        for s in 0..n {
            self.im2col(x.sample(s), h, w, oh, ow, &mut col);
            let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
            T::gemm(
                self.out_channels,
                rows,
                p,
                T::one(),
                self.weight.data(),
                false,
                &col,
                false,
                T::zero(),
                dst,
            );
            if let Some(bias) = &self.bias {
                for (o, &b) in bias.data().iter().enumerate() {
                    for v in &mut dst[o * p..(o + 1) * p] {
                        *v += b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of the forward map given the cached input and upstream gradient.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let out_shape = self.output_shape(x.shape())?;
        if grad_out.shape() != out_shape.as_slice() {
            return Err(Error::Shape(format!(
                "conv backward: upstream {:?} vs output {:?}",
                grad_out.shape(),
                out_shape
            )));
        }
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let rows = self.fan_in();
        let p = oh * ow;
        let mut col = vec![T::zero(); rows * p];
        let mut dcol = vec![T::zero(); rows * p];
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = vec![0f64; self.out_channels];
        let in_len = x.sample_len();
        for s in 0..n {
            let g = grad_out.sample(s);
            self.im2col(x.sample(s), h, w, oh, ow, &mut col);
            T::gemm(
                self.out_channels,
                p,
                rows,
                T::one(),
                g,
                false,
                &col,
                true,
                T::one(),
                dw.data_mut(),
            );
            T::gemm(
                rows,
                self.out_channels,
                p,
                T::one(),
                self.weight.data(),
                true,
                g,
                false,
                T::zero(),
                &mut dcol,
            );
            self.col2im(
                &dcol,
                h,
                w,
                oh,
                ow,
                &mut dx.data_mut()[s * in_len..(s + 1) * in_len],
            );
            if self.bias.is_some() {
                for (o, acc) in db.iter_mut().enumerate() {
                    *acc += g[o * p..(o + 1) * p]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
            }
        }
        let bias = self.bias.as_ref().map(|_| {
            Tensor::from_vec(
                &[self.out_channels],
                db.into_iter().map(T::from_f64).collect(),
            )
            .expect("bias length")
        });
        Ok(ConvGrads {
            input: dx,
            weight: dw,
            bias,
        })
    }
}
