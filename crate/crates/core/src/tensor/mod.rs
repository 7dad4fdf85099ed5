//! Dense channels-first tensors and the numerical kernels used by the
//! detector's forward pass and by gradient propagation.
//!
//! Feature maps are rank 3 (`C×H×W`), convolution kernels rank 4
//! (`O×I×Kh×Kw`). All storage is row-major `f32`.

mod activation;
mod conv;
mod gemm;
mod pool;
mod resample;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use activation::{pointwise_forward_backward, sigmoid, Activation, DEFAULT_LEAKY_SLOPE};
pub use conv::{conv2d_backward_input, conv2d_forward, conv_output_extent};
pub use pool::MaxPool;
pub use resample::{concat_channels, split_channels, upsample_backward, upsample_forward};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub const MAX_RANK: usize = 4;

    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{len} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    ///
    /// If the shape has rank 0, rank above 4, or a zero extent.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    /// # Panics
    ///
    /// Same conditions as [`Tensor::zeros`].
    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a `C×H×W` feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape("feature map", "rank 3 (C×H×W)", format!("{:?}", self.shape))),
        }
    }

    pub fn get3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, format!("{shape:?}"), format!("{:?}", self.shape)));
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub(crate) fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        other.expect_shape("accumulate", &self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &format_args!("{head:?}{}", if self.data.len() > PREVIEW { " .." } else { "" }))
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > Tensor::MAX_RANK || shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            "1 to 4 extents, each at least 1",
            format!("{shape:?}"),
        ));
    }
    Ok(())
}

/// Inference-mode batch normalization statistics for one convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

/// Parameters of a single convolution.
///
/// With batch normalization present the per-channel shift plays the role of
/// the bias and `bias` is not applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub batchnorm: Option<BatchNorm>,
    pub epsilon: f32,
}

impl LayerParams {
    pub const DEFAULT_EPSILON: f32 = 1e-5;

    pub fn new(weights: Tensor, bias: Vec<f32>, batchnorm: Option<BatchNorm>) -> Result<Self> {
        let params = LayerParams {
            weights,
            bias,
            batchnorm,
            epsilon: Self::DEFAULT_EPSILON,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// `(out, in, kh, kw)`
    pub fn kernel_dims(&self) -> Result<(usize, usize, usize, usize)> {
        match self.weights.shape()[..] {
            [o, i, kh, kw] => Ok((o, i, kh, kw)),
            _ => Err(Error::shape(
                "conv weights",
                "rank 4 (O×I×Kh×Kw)",
                format!("{:?}", self.weights.shape()),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (o, ..) = self.kernel_dims()?;
        if self.bias.len() != o {
            return Err(Error::shape("conv bias", o, self.bias.len()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid(format!("batchnorm epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some(bn) = &self.batchnorm {
            for (name, v) in [
                ("scale", &bn.scale),
                ("shift", &bn.shift),
                ("mean", &bn.mean),
                ("variance", &bn.variance),
            ] {
                if v.len() != o {
                    return Err(Error::Shape {
                        op: "batchnorm",
                        expected: format!("{o} {name} entries"),
                        actual: v.len().to_string(),
                    });
                }
            }
            if bn.variance.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("batchnorm running variance must be non-negative"));
            }
        }
        Ok(())
    }

    /// Per-channel factor applied to the raw correlation, i.e. the derivative
    /// of the conv output with respect to the raw correlation.
    pub(crate) fn output_gain(&self) -> Vec<f32> {
        match &self.batchnorm {
            Some(bn) => bn
                .scale
                .iter()
                .zip(&bn.variance)
                .map(|(s, v)| s / (v + self.epsilon).sqrt())
                .collect(),
            None => vec![1.0; self.out_channels()],
        }
    }
}
