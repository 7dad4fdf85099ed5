use super::forward::{conv_params, ActivationCache};
use crate::error::{Error, Result};
use crate::model::{LayerInput, LayerKind, NetworkSpec};
use crate::tensor::{conv2d_backward_input, split_channels, upsample_backward, Tensor};

/// Propagates `grad` (the gradient of a scalar with respect to the output of
/// layer `from`) back to the output of `to`, walking the layer graph in
/// reverse. Only paths that pass through `to` contribute.
pub fn backpropagate(
    spec: &NetworkSpec,
    cache: &ActivationCache,
    from: usize,
    grad: Tensor,
    to: LayerInput,
) -> Result<Tensor> {
    if from >= spec.layers.len() || cache.outputs.len() != spec.layers.len() {
        return Err(Error::invalid(format!("layer {from} is not part of this forward pass")));
    }
    grad.expect_shape("backpropagate seed", cache.outputs[from].shape())?;
    let lower = match to {
        LayerInput::Layer(t) if t == from => return Ok(grad),
        LayerInput::Layer(t) => {
            if t > from || !spec.ancestors(from).contains(&t) {
                return Err(Error::invalid(format!("layer {from} does not depend on layer {t}")));
            }
            t + 1
        }
        LayerInput::Image => 0,
    };

    let mut grads: Vec<Option<Tensor>> = vec![None; from + 1];
    let mut image_grad: Option<Tensor> = None;
    grads[from] = Some(grad);

    for idx in (lower..=from).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let inputs = spec.inputs_of(idx);
        let pieces: Vec<Tensor> = match &spec.layers[idx].kind {
            LayerKind::Convolutional(conv) => {
                let g_pre = conv.activation.backward(&cache.outputs[idx], &g)?;
                let in_shape = cache.get(inputs[0]).shape();
                vec![conv2d_backward_input(&g_pre, conv_params(spec, idx)?, conv.stride, conv.padding, in_shape)?]
            }
            LayerKind::MaxPool(pool) => {
                let input = cache.get(inputs[0]);
                let (_, argmax) = pool.forward(input)?;
                vec![pool.backward(input.shape(), &argmax, &g)?]
            }
            LayerKind::Upsample { stride } => vec![upsample_backward(&g, *stride)?],
            LayerKind::Route { .. } => {
                let channels: Vec<usize> = inputs.iter().map(|&s| spec.shape_of(s)[0]).collect();
                split_channels(&g, &channels)?
            }
            LayerKind::Yolo(_) => vec![g],
        };

        for (input, piece) in inputs.into_iter().zip(pieces) {
            let slot = match input {
                LayerInput::Layer(j) if j + 1 >= lower => &mut grads[j],
                LayerInput::Image if to == LayerInput::Image => &mut image_grad,
                _ => continue,
            };
            match slot {
                Some(acc) => acc.accumulate(&piece)?,
                None => *slot = Some(piece),
            }
        }
    }

    let result = match to {
        LayerInput::Image => image_grad,
        LayerInput::Layer(t) => grads[t].take(),
    };
    Ok(result.unwrap_or_else(|| Tensor::zeros(cache.get(to).shape().to_vec())))
}
