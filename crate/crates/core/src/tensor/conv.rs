use super::gemm::matmul;
use super::{LayerParams, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided, zero-padded correlation along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Geometry {
            op: "conv2d",
            message: "stride must be positive".into(),
        });
    }
    let padded = input + 2 * pad;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Geometry {
            op: "conv2d",
            message: format!(
                "extent {input} with pad {pad}, kernel {kernel}, stride {stride} does not give an integer output size"
            ),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input_shape: &[usize], params: &LayerParams, stride: usize, pad: usize) -> Result<Self> {
        let (c_out, c_kernel, kh, kw) = params.kernel_dims()?;
        let (c_in, h, w) = match input_shape[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("conv2d input", "rank 3 (C×H×W)", format!("{input_shape:?}"))),
        };
        if c_kernel != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("{c_kernel} input channels (weights {:?})", params.weights.shape()),
                format!("{c_in} channels (input {input_shape:?})"),
            ));
        }
        let oh = conv_output_extent(h, kh, stride, pad)?;
        let ow = conv_output_extent(w, kw, stride, pad)?;
        Ok(Geometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_row, out_index, in_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let n = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * n];
        self.for_each_tap(|row, o, i| cols[row * n + o] = input[i]);
        cols
    }

    fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let n = self.out_len();
        let mut image = vec![0.0; self.c_in * self.h * self.w];
        self.for_each_tap(|row, o, i| image[i] += cols[row * n + o]);
        image
    }
}

/// Cross-correlation followed by either batch normalization (inference mode)
/// or a per-channel bias. No activation is applied.
pub fn conv2d_forward(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), params, stride, pad)?;
    let n = g.out_len();
    let mut out = vec![0.0; g.c_out * n];
    if g.is_pointwise() {
        matmul(g.c_out, g.patch_len(), n, params.weights.data(), false, input.data(), &mut out);
    } else {
        let cols = g.im2col(input.data());
        matmul(g.c_out, g.patch_len(), n, params.weights.data(), false, &cols, &mut out);
    }

    match &params.batchnorm {
        Some(bn) => {
            for (c, plane) in out.chunks_exact_mut(n).enumerate() {
                let std = (bn.variance[c] + params.epsilon).sqrt();
                for v in plane {
                    *v = (*v - bn.mean[c]) / std * bn.scale[c] + bn.shift[c];
                }
            }
        }
        None => {
            for (plane, b) in out.chunks_exact_mut(n).zip(&params.bias) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradient of a scalar loss with respect to the convolution input, given
/// its gradient with respect to the (pre-activation) convolution output.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    let g = Geometry::new(input_shape, params, stride, pad)?;
    grad_out.expect_shape("conv2d backward", &[g.c_out, g.oh, g.ow])?;
    let n = g.out_len();

    let gain = params.output_gain();
    let mut scaled = grad_out.data().to_vec();
    for (plane, k) in scaled.chunks_exact_mut(n).zip(&gain) {
        plane.iter_mut().for_each(|v| *v *= k);
    }

    let mut cols = vec![0.0; g.patch_len() * n];
    matmul(g.patch_len(), g.c_out, n, params.weights.data(), true, &scaled, &mut cols);
    let grad_in = if g.is_pointwise() { cols } else { g.col2im(&cols) };
    Tensor::new(input_shape.to_vec(), grad_in)
}
