use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu backward shape")
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Row-wise softmax over the last axis of a `[N, K]` tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    if k == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = 0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += v.as_f64();
        }
        let inv = T::from_f64(1.0 / total);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_its_gradient() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&g, &x).data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(2.0f64) - 0.880797).abs() < 1e-6);
        let tiny = sigmoid_scalar(-1000.0f64);
        assert!(tiny.is_finite() && (0.0..1e-300).contains(&tiny));
        assert_eq!(sigmoid_scalar(1000.0f32), 1.0);
    }

    #[test]
    fn softmax_values_and_invariances() {
        let x = Tensor::<f64>::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax(&x);
        for (got, want) in p.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
        let shifted = softmax(&x.map(|v| v + 1234.5));
        for (a, b) in p.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let uniform = softmax(&Tensor::<f64>::full(&[2, 4], 7.0));
        assert!(uniform.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
