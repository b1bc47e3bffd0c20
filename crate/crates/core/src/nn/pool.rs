use crate::error::{Error, Result};
use crate::nn::conv::window_out;
use crate::tensor::{Scalar, Tensor};

/// Max pooling without padding. Window ties resolve to the first row-major
/// position, both in the cached argmax and therefore in the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 {
            return Err(Error::Shape(format!(
                "max-pool expects [N, C, H, W], got {input:?}"
            )));
        }
        match (
            window_out(input[2], self.size, self.stride, 0),
            window_out(input[3], self.size, self.stride, 0),
        ) {
            (Some(oh), Some(ow)) => Ok(vec![input[0], input[1], oh, ow]),
            _ => Err(Error::Shape(format!(
                "{}x{} input smaller than {}x{} pool",
                input[2], input[3], self.size, self.size
            ))),
        }
    }

    /// Returns the pooled tensor and, per output element, the flat index of
    /// the selected input element.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let shape = self.output_shape(x.shape())?;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let mut out = Tensor::zeros(&shape);
        let mut argmax = vec![0usize; out.len()];
        let xs = x.data();
        for plane in 0..planes {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * self.stride * w + ox * self.stride;
                    let mut best = xs[best_idx];
                    for i in 0..self.size {
                        let row = base + (oy * self.stride + i) * w + ox * self.stride;
                        for j in 0..self.size {
                            let v = xs[row + j];
                            if v > best {
                                best = v;
                                best_idx = row + j;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn backward<T: Scalar>(
        &self,
        input_shape: &[usize],
        argmax: &[usize],
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if argmax.len() != grad_out.len() {
            return Err(Error::Shape(format!(
                "max-pool backward: {} upstream values for {} windows",
                grad_out.len(),
                argmax.len()
            )));
        }
        let mut dx = Tensor::zeros(input_shape);
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            dx.data_mut()[idx] += g;
        }
        Ok(dx)
    }
}
