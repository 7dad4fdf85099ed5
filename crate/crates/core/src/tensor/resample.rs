use super::Tensor;
use crate::error::{Error, Result};

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h * factor, w * factor);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &src[(ch * h + oy / factor) * w..][..w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Sums each `factor×factor` block of the output gradient into its source cell.
pub fn upsample_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.dims3()?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape(
            "upsample backward",
            format!("spatial extents divisible by {factor}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut grad_in = vec![0.0; c * h * w];
    let g = grad_out.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                grad_in[(ch * h + oy / factor) * w + ox / factor] += g[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(vec![c, h, w], grad_in)
}

/// Concatenates feature maps along the channel axis, in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::invalid("concat needs at least one input"))?;
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    for t in inputs {
        let (c, th, tw) = t.dims3()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape("concat", format!("spatial {h}×{w}"), format!("{th}×{tw}")));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Inverse bookkeeping of [`concat_channels`]: splits a gradient into pieces
/// with the given channel counts.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = grad.dims3()?;
    let total: usize = channels.iter().sum();
    if total != c {
        return Err(Error::shape("concat backward", format!("{total} channels"), c));
    }
    let plane = h * w;
    let mut offset = 0;
    channels
        .iter()
        .map(|&n| {
            let piece = grad.data()[offset * plane..(offset + n) * plane].to_vec();
            offset += n;
            Tensor::new(vec![n, h, w], piece)
        })
        .collect()
}
