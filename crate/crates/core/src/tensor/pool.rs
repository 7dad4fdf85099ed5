use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Max pooling with darknet padding semantics: `padding` total cells of
/// virtual −∞ border, `padding / 2` of them before the first row/column and
/// the rest after the last. With the default `padding = size - 1`, a
/// `size 2, stride 1` pool keeps the spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        Self::with_padding(size, stride, size.saturating_sub(1))
    }

    pub fn with_padding(size: usize, stride: usize, padding: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::invalid(format!("maxpool size and stride must be positive (size {size}, stride {stride})")));
        }
        if padding >= size {
            return Err(Error::invalid(format!("maxpool padding {padding} must be below size {size}")));
        }
        Ok(MaxPool { size, stride, padding })
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + self.padding;
        if padded < self.size {
            return Err(Error::Geometry {
                op: "maxpool",
                message: format!("extent {input} is smaller than the window {}", self.size),
            });
        }
        Ok((padded - self.size) / self.stride + 1)
    }

    /// Returns the pooled map and, per output cell, the flat input index of
    /// the winning element. Ties go to the first element in row-major order.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = input.dims3()?;
        let oh = self.output_extent(h)?;
        let ow = self.output_extent(w)?;
        let offset = (self.padding / 2) as isize;
        let data = input.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.size {
                        let iy = (oy * self.stride + ky) as isize - offset;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.size {
                            let ix = (ox * self.stride + kx) as isize - offset;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if best_idx == usize::MAX || data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
    }

    pub fn backward(&self, input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.len() != argmax.len() {
            return Err(Error::shape("maxpool backward", format!("{} gradient entries", argmax.len()), grad_out.len()));
        }
        let mut grad_in = Tensor::zeros(input_shape.to_vec());
        let gi = grad_in.data_mut();
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            gi[idx] += g;
        }
        Ok(grad_in)
    }

    /// Forward pass bundled with its gradient routing.
    pub fn forward_backward(&self, input: &Tensor) -> Result<(Tensor, impl Fn(&Tensor) -> Result<Tensor>)> {
        let (out, argmax) = self.forward(input)?;
        let pool = *self;
        let shape = input.shape().to_vec();
        Ok((out, move |g: &Tensor| pool.backward(&shape, &argmax, g)))
    }
}
