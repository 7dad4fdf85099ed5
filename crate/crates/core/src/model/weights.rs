//! Darknet `.weights` layout: five little-endian `u32` header words
//! (major, minor, revision, then "images seen" as two words), followed by
//! each convolution's parameters in layer order. Per convolution:
//! biases, then if batch-normalized scales, running means and running
//! variances, then the kernel in `O×I×Kh×Kw` row-major order. Every value
//! is a little-endian `f32`.

use super::{LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, LayerParams, Tensor};

pub const WEIGHTS_HEADER_WORDS: usize = 5;
const HEADER_BYTES: usize = WEIGHTS_HEADER_WORDS * 4;
const HEADER: [u32; WEIGHTS_HEADER_WORDS] = [0, 2, 0, 0, 0];

/// Number of parameter floats a weights file for `spec` must contain.
pub fn expected_float_count(spec: &NetworkSpec) -> usize {
    conv_shapes(spec)
        .map(|(_, o, i, k, bn)| o * i * k * k + o * if bn { 4 } else { 1 })
        .sum()
}

fn conv_shapes(spec: &NetworkSpec) -> impl Iterator<Item = (usize, usize, usize, usize, bool)> + '_ {
    spec.layers.iter().enumerate().filter_map(move |(idx, node)| match &node.kind {
        LayerKind::Convolutional(c) => {
            let c_in = spec.shape_of(spec.inputs_of(idx)[0])[0];
            Some((idx, c.filters, c_in, c.size, c.batch_normalize))
        }
        _ => None,
    })
}

/// Populates every convolution of `spec` from a darknet weights blob.
pub fn load_weights(bytes: &[u8], mut spec: NetworkSpec) -> Result<NetworkSpec> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Weights(format!(
            "file is {} bytes, shorter than the {HEADER_BYTES}-byte header",
            bytes.len()
        )));
    }
    let body = &bytes[HEADER_BYTES..];
    if !body.len().is_multiple_of(4) {
        return Err(Error::Weights(format!(
            "{} payload bytes is not a whole number of floats",
            body.len()
        )));
    }
    let expected = expected_float_count(&spec);
    let actual = body.len() / 4;
    if expected != actual {
        return Err(Error::WeightCount { expected, actual });
    }

    let mut floats = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut take = |n: usize, layer: usize| -> Result<Vec<f32>> {
        let v: Vec<f32> = floats.by_ref().take(n).collect();
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::Weights(format!("layer {layer} holds a non-finite value ({bad})")));
        }
        Ok(v)
    };

    let shapes: Vec<_> = conv_shapes(&spec).collect();
    for (idx, o, i, k, bn) in shapes {
        let bias = take(o, idx)?;
        let params = if bn {
            let scale = take(o, idx)?;
            let mean = take(o, idx)?;
            let variance = take(o, idx)?;
            let weights = Tensor::new(vec![o, i, k, k], take(o * i * k * k, idx)?)?;
            let batchnorm = BatchNorm {
                scale,
                shift: bias,
                mean,
                variance,
            };
            LayerParams::new(weights, vec![0.0; o], Some(batchnorm))
        } else {
            let weights = Tensor::new(vec![o, i, k, k], take(o * i * k * k, idx)?)?;
            LayerParams::new(weights, bias, None)
        }
        .map_err(|e| Error::Weights(format!("layer {idx}: {e}")))?;
        spec.layers[idx].params = Some(params);
    }
    Ok(spec)
}

/// Inverse of [`load_weights`]. Fails if any convolution lacks parameters.
pub fn serialize_weights(spec: &NetworkSpec) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * expected_float_count(spec));
    for w in HEADER {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let mut put = |values: &[f32]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for (idx, o, i, k, bn) in conv_shapes(spec) {
        let params = spec.layers[idx]
            .params
            .as_ref()
            .ok_or_else(|| Error::Weights(format!("layer {idx} has no parameters to serialize")))?;
        params.weights.expect_shape("serialize weights", &[o, i, k, k])?;
        match (&params.batchnorm, bn) {
            (Some(b), true) => {
                put(&b.shift);
                put(&b.scale);
                put(&b.mean);
                put(&b.variance);
            }
            (None, false) => put(&params.bias),
            _ => {
                return Err(Error::Weights(format!(
                    "layer {idx}: batchnorm parameters disagree with the layer's batch_normalize flag"
                )))
            }
        }
        put(params.weights.data());
    }
    Ok(out)
}
