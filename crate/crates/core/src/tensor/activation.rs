use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.1;

/// Numerically stable logistic function.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Leaky { slope: f32 },
    Logistic,
}

impl Activation {
    pub fn leaky(slope: f32) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(format!("leaky slope must lie in (0, 1), got {slope}")));
        }
        Ok(Activation::Leaky { slope })
    }

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Leaky { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Logistic => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output. For leaky ReLU
    /// the output has the sign of the input, so this is exact; at zero the
    /// derivative is taken as 1.
    #[inline]
    pub fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::Leaky { slope } => {
                if y >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Logistic => y * (1.0 - y),
        }
    }

    pub fn forward(self, input: &Tensor) -> Tensor {
        match self {
            Activation::Linear => input.clone(),
            _ => input.map(|x| self.apply(x)),
        }
    }

    pub fn forward_in_place(self, t: &mut Tensor) {
        if self != Activation::Linear {
            t.data_mut().iter_mut().for_each(|x| *x = self.apply(*x));
        }
    }

    pub fn backward(self, output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        grad_out.expect_shape("activation backward", output.shape())?;
        if self == Activation::Linear {
            return Ok(grad_out.clone());
        }
        let data = output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| g * self.derivative_from_output(y))
            .collect();
        Tensor::new(output.shape().to_vec(), data)
    }
}

/// Applies `kind` and returns the output with a closure computing the
/// input gradient from an output gradient.
pub fn pointwise_forward_backward(
    kind: Activation,
    input: &Tensor,
) -> (Tensor, impl Fn(&Tensor) -> Result<Tensor>) {
    let output = kind.forward(input);
    let saved = output.clone();
    (output, move |grad_out: &Tensor| kind.backward(&saved, grad_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_values() {
        let x = Tensor::new(vec![3], vec![-10.0, 0.0, 10.0]).unwrap();
        let (y, back) = pointwise_forward_backward(Activation::leaky(0.1).unwrap(), &x);
        assert_eq!(y.data(), &[-1.0, 0.0, 10.0]);
        let g = back(&Tensor::filled(vec![3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.1, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::zeros(vec![1]);
        let (y, back) = pointwise_forward_backward(Activation::Logistic, &x);
        assert_eq!(y.data(), &[0.5]);
        assert_eq!(back(&Tensor::filled(vec![1], 1.0)).unwrap().data(), &[0.25]);
    }

    #[test]
    fn sigmoid_is_stable_far_out() {
        assert_eq!(sigmoid(-200.0), 0.0);
        assert_eq!(sigmoid(200.0), 1.0);
        assert!((sigmoid(20.0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn slope_range_enforced() {
        assert!(Activation::leaky(0.0).is_err());
        assert!(Activation::leaky(1.0).is_err());
    }

    #[test]
    fn backward_shape_mismatch() {
        let y = Tensor::zeros(vec![2, 2]);
        assert!(Activation::Logistic.backward(&y, &Tensor::zeros(vec![4])).is_err());
    }
}
