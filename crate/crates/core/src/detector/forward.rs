use crate::error::{Error, Result};
use crate::model::{LayerInput, LayerKind, NetworkSpec};
use crate::tensor::{concat_channels, conv2d_forward, upsample_forward, LayerParams, Tensor};

/// Every layer's output from one forward pass, kept for gradient propagation.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
}

impl ActivationCache {
    pub fn get(&self, at: LayerInput) -> &Tensor {
        match at {
            LayerInput::Image => &self.input,
            LayerInput::Layer(i) => &self.outputs[i],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Raw (pre-sigmoid) head tensors, `A·(5+C) × Gy × Gx`, in head order.
    pub head_outputs: Vec<Tensor>,
    pub cache: ActivationCache,
}

pub(crate) fn conv_params(spec: &NetworkSpec, index: usize) -> Result<&LayerParams> {
    spec.layers[index]
        .params
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("layer {index} has no loaded parameters")))
}

/// Runs the network on a `C×H×W` image with values in `[0, 1]`.
pub fn forward(spec: &NetworkSpec, image: &Tensor) -> Result<ForwardPass> {
    image.expect_shape("forward input", &spec.input_shape())?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(spec.layers.len());
    for (idx, node) in spec.layers.iter().enumerate() {
        let input = |at: LayerInput| match at {
            LayerInput::Image => image,
            LayerInput::Layer(i) => &outputs[i],
        };
        let first = input(spec.inputs_of(idx)[0]);
        let out = match &node.kind {
            LayerKind::Convolutional(conv) => {
                let mut out = conv2d_forward(first, conv_params(spec, idx)?, conv.stride, conv.padding)?;
                conv.activation.forward_in_place(&mut out);
                out
            }
            LayerKind::MaxPool(pool) => pool.forward(first)?.0,
            LayerKind::Upsample { stride } => upsample_forward(first, *stride)?,
            LayerKind::Route { sources } => {
                if sources.len() == 1 {
                    outputs[sources[0]].clone()
                } else {
                    let parts: Vec<&Tensor> = sources.iter().map(|&s| &outputs[s]).collect();
                    concat_channels(&parts)?
                }
            }
            LayerKind::Yolo(_) => first.clone(),
        };
        debug_assert_eq!(out.shape(), &node.output_shape[..], "layer {idx}");
        outputs.push(out);
    }
    let head_outputs = spec.head_indices.iter().map(|&h| outputs[h].clone()).collect();
    Ok(ForwardPass {
        head_outputs,
        cache: ActivationCache {
            input: image.clone(),
            outputs,
        },
    })
}
