use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer: `y = x W^T + b` over a `[N, in]` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, with_bias: bool) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: with_bias.then(|| Tensor::zeros(&[out_features])),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.rank() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::Shape(format!(
                "fully connected layer expects [N, {}], got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let mut out = Tensor::zeros(&[n, self.out_features]);
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            false,
            self.weight.data(),
            true,
            T::zero(),
            out.data_mut(),
        );
        if let Some(bias) = &self.bias {
            for row in out.data_mut().chunks_mut(self.out_features) {
                for (v, &b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
        let n = self.check_input(x)?;
        if grad_out.shape() != [n, self.out_features] {
            return Err(Error::Shape(format!(
                "fully connected backward: upstream {:?}, expected [{n}, {}]",
                grad_out.shape(),
                self.out_features
            )));
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            grad_out.data(),
            false,
            self.weight.data(),
            false,
            T::zero(),
            dx.data_mut(),
        );
        let mut dw = Tensor::zeros(self.weight.shape());
        T::gemm(
            self.out_features,
            n,
            self.in_features,
            T::one(),
            grad_out.data(),
            true,
            x.data(),
            false,
            T::zero(),
            dw.data_mut(),
        );
        let bias = self.bias.as_ref().map(|_| {
            let mut sums = vec![0f64; self.out_features];
            for row in grad_out.data().chunks(self.out_features) {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            Tensor::from_vec(
                &[self.out_features],
                sums.into_iter().map(T::from_f64).collect(),
            )
            .expect("bias length")
        });
        Ok(LinearGrads {
            input: dx,
            weight: dw,
            bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input_through() {
        let mut fc = Linear::<f64>::new(3, 3, true);
        for i in 0..3 {
            fc.weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        assert_eq!(fc.forward(&x).unwrap(), x);
    }

    #[test]
    fn random_weights_match_loop_oracle() {
        let mut fc = Linear::<f64>::new(3, 4, true);
        fc.weight =
            Tensor::from_vec(&[4, 3], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        fc.bias = Some(Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, -0.4]).unwrap());
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.1, 2.0, 1.5, 0.2, -0.7]).unwrap();
        let y = fc.forward(&x).unwrap();
        for s in 0..2 {
            for o in 0..4 {
                let mut acc = fc.bias.as_ref().unwrap().data()[o];
                for i in 0..3 {
                    acc += fc.weight.data()[o * 3 + i] * x.data()[s * 3 + i];
                }
                assert!((y.data()[s * 4 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bias_gradient_is_column_sum() {
        let fc = Linear::<f64>::new(2, 3, true);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let grads = fc.backward(&x, &g).unwrap();
        assert_eq!(grads.bias.unwrap().data(), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut fc = Linear::<f64>::new(2, 2, true);
        fc.weight.data_mut().fill(0.5);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let g = fc.backward(&x, &Tensor::zeros(&[1, 2])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let fc = Linear::<f32>::new(4, 2, false);
        assert!(fc.forward(&Tensor::zeros(&[1, 3])).is_err());
    }
}
