//! Gradient-weighted class activation maps for individual detections.
//!
//! The explained scalar is one neuron of a head's output convolution (the
//! objectness or a class logit of the detection's cell and anchor). Its
//! gradient with respect to a feature map `A` (`K×h×w`, by default the
//! convolution feeding the head) weights the channels of `A`:
//!
//! * classic: `α_k = mean_{y,x} ∂s/∂A_k`, map `= ReLU(mean_k α_k A_k)`
//! * elementwise: map `= ReLU(mean_k ∂s/∂A_k ⊙ A_k)`
//!
//! The map lives on the whole feature grid; nothing restricts it to the
//! detection's box.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{
    backpropagate, forward, locate_target_neuron, ActivationCache, Detection, NeuronAddress, Target, CLASS_OFFSET,
    OBJECTNESS_OFFSET,
};
use crate::error::{Error, Result};
use crate::model::{LayerInput, LayerKind, NetworkSpec};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    #[default]
    Classic,
    Elementwise,
}

/// Whether the explained scalar is the raw logit or its sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    #[default]
    Sigmoid,
    Logit,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::invalid(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(CamMode { Classic => "classic", Elementwise => "elementwise" });
str_enum!(TargetTransform { Sigmoid => "sigmoid", Logit => "logit" });

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CamOptions {
    pub mode: CamMode,
    pub transform: TargetTransform,
    /// Feature map to attribute to instead of the head's default.
    pub target_layer: Option<usize>,
}

/// Raw, non-negative attribution at feature-map resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `1×h×w`
    pub values: Tensor,
    pub target: Target,
    pub neuron: NeuronAddress,
    pub target_layer: usize,
    pub detection_ref: Option<usize>,
    pub raw_min: f32,
    pub raw_max: f32,
}

impl AttributionMap {
    pub fn new(
        values: Tensor,
        target: Target,
        neuron: NeuronAddress,
        target_layer: usize,
        detection_ref: Option<usize>,
    ) -> Result<Self> {
        values.dims3().and_then(|(c, _, _)| {
            if c == 1 {
                Ok(())
            } else {
                Err(Error::shape("attribution map", "1×h×w", format!("{:?}", values.shape())))
            }
        })?;
        if values.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("attribution values must be finite and non-negative"));
        }
        Ok(AttributionMap {
            raw_min: values.min(),
            raw_max: values.max(),
            values,
            target,
            neuron,
            target_layer,
            detection_ref,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn with_detection_ref(mut self, index: usize) -> Self {
        self.detection_ref = Some(index);
        self
    }
}

/// The feature map a head's explanations are computed against: by default
/// the convolution whose output feeds the head's output convolution.
pub fn select_target_layer(spec: &NetworkSpec, head_index: usize, override_layer: Option<usize>) -> Result<usize> {
    let head_conv = spec.head_conv(head_index)?;
    if let Some(layer) = override_layer {
        if spec.conv(layer).is_none() || !spec.ancestors(head_conv).contains(&layer) {
            return Err(Error::invalid(format!(
                "layer {layer} is not a convolution upstream of head {head_index}'s output layer {head_conv}"
            )));
        }
        return Ok(layer);
    }
    let mut at = spec.inputs_of(head_conv)[0];
    while let LayerInput::Layer(i) = at {
        match &spec.layers[i].kind {
            LayerKind::Convolutional(_) => return Ok(i),
            LayerKind::Route { sources } if sources.len() == 1 => at = LayerInput::Layer(sources[0]),
            _ => break,
        }
    }
    Err(Error::invalid(format!(
        "head {head_index}'s output layer is not fed by a convolution; pass an explicit target layer"
    )))
}

fn target_of(spec: &NetworkSpec, neuron: &NeuronAddress) -> Result<Target> {
    let head = spec
        .head_of_conv(neuron.layer_index)
        .ok_or_else(|| Error::invalid(format!("layer {} is not a head output layer", neuron.layer_index)))?;
    let yolo = spec.yolo(head)?;
    let [channels, gy, gx] = spec.layers[neuron.layer_index].output_shape;
    if neuron.channel >= channels || neuron.grid_y >= gy || neuron.grid_x >= gx {
        return Err(Error::invalid(format!("neuron {neuron:?} is outside the {channels}×{gy}×{gx} head output")));
    }
    match neuron.channel % yolo.entries_per_anchor() {
        OBJECTNESS_OFFSET => Ok(Target::Objectness),
        k if k >= CLASS_OFFSET => Ok(Target::Class(k - CLASS_OFFSET)),
        _ => Err(Error::invalid(format!("channel {} holds a box coordinate, not a score", neuron.channel))),
    }
}

/// Gradient of the explained scalar with respect to the target layer's output.
pub fn target_gradient(
    spec: &NetworkSpec,
    cache: &ActivationCache,
    neuron: &NeuronAddress,
    target_layer: usize,
    transform: TargetTransform,
) -> Result<Tensor> {
    target_of(spec, neuron)?;
    let head_out = &cache.outputs[neuron.layer_index];
    let z = head_out.get3(neuron.channel, neuron.grid_y, neuron.grid_x);
    let seed_value = match transform {
        TargetTransform::Logit => 1.0,
        TargetTransform::Sigmoid => {
            let s = sigmoid(z);
            s * (1.0 - s)
        }
    };
    let (_, gy, gx) = head_out.dims3()?;
    let mut seed = Tensor::zeros(head_out.shape().to_vec());
    seed.data_mut()[(neuron.channel * gy + neuron.grid_y) * gx + neuron.grid_x] = seed_value;
    backpropagate(spec, cache, neuron.layer_index, seed, LayerInput::Layer(target_layer))
}

/// Grad-CAM map of one head neuron against `target_layer`.
pub fn compute_cam(
    spec: &NetworkSpec,
    cache: &ActivationCache,
    neuron: &NeuronAddress,
    target_layer: usize,
    options: CamOptions,
) -> Result<AttributionMap> {
    let target = target_of(spec, neuron)?;
    let grad = target_gradient(spec, cache, neuron, target_layer, options.transform)?;
    let activation = &cache.outputs[target_layer];
    let (k, h, w) = activation.dims3()?;
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    let channels = activation.data().chunks_exact(plane).zip(grad.data().chunks_exact(plane));
    match options.mode {
        CamMode::Classic => {
            for (a, g) in channels {
                let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                if alpha != 0.0 {
                    acc.iter_mut().zip(a).for_each(|(m, &v)| *m += alpha * v as f64);
                }
            }
        }
        CamMode::Elementwise => {
            for (a, g) in channels {
                for ((m, &av), &gv) in acc.iter_mut().zip(a).zip(g) {
                    *m += av as f64 * gv as f64;
                }
            }
        }
    }
    let values = acc.into_iter().map(|v| ((v / k as f64).max(0.0)) as f32).collect();
    AttributionMap::new(Tensor::new(vec![1, h, w], values)?, target, *neuron, target_layer, None)
}

/// Explains one detection for each requested target, reusing `cache`.
pub fn explain_with_cache(
    spec: &NetworkSpec,
    cache: &ActivationCache,
    d: &Detection,
    targets: &[Target],
    options: CamOptions,
) -> Result<Vec<AttributionMap>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let layer = select_target_layer(spec, d.provenance.head_index, options.target_layer)?;
    targets
        .iter()
        .map(|&t| {
            let neuron = locate_target_neuron(d, t, spec)?;
            compute_cam(spec, cache, &neuron, layer, options)
        })
        .collect()
}

/// Runs the network once on `image` and explains `d` for each target.
pub fn explain_detection(
    spec: &NetworkSpec,
    image: &Tensor,
    d: &Detection,
    targets: &[Target],
    options: CamOptions,
) -> Result<Vec<AttributionMap>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let pass = forward(spec, image)?;
    explain_with_cache(spec, &pass.cache, d, targets, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_network_config, randomize_params, REFERENCE_TINY_YOLO_V3_CFG};

    #[test]
    fn default_target_layers_of_reference() {
        let spec = parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).unwrap();
        let l0 = select_target_layer(&spec, 0, None).unwrap();
        let l1 = select_target_layer(&spec, 1, None).unwrap();
        assert_eq!((l0, l1), (14, 21));
        assert_eq!(spec.layers[l0].output_shape[0], 512);
        assert_eq!(spec.layers[l1].output_shape[0], 256);
        assert_eq!(select_target_layer(&spec, 0, Some(12)).unwrap(), 12);
        // after the head conv, off-path, and not a conv
        assert!(select_target_layer(&spec, 0, Some(16)).is_err());
        assert!(select_target_layer(&spec, 0, Some(21)).is_err());
        assert!(select_target_layer(&spec, 0, Some(11)).is_err());
        assert!(select_target_layer(&spec, 2, None).is_err());
    }

    #[test]
    fn box_channels_are_not_targets() {
        let spec = randomize_params(parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).unwrap(), 1);
        let n = NeuronAddress { layer_index: 15, channel: 2, grid_y: 0, grid_x: 0 };
        assert!(target_of(&spec, &n).is_err());
        let n = NeuronAddress { layer_index: 14, channel: 4, grid_y: 0, grid_x: 0 };
        assert!(target_of(&spec, &n).is_err());
        let n = NeuronAddress { layer_index: 22, channel: 27, grid_y: 25, grid_x: 0 };
        assert_eq!(target_of(&spec, &n).unwrap(), Target::Class(2));
    }

    #[test]
    fn option_strings() {
        assert_eq!("elementwise".parse::<CamMode>().unwrap(), CamMode::Elementwise);
        assert_eq!("logit".parse::<TargetTransform>().unwrap(), TargetTransform::Logit);
        assert!("softmax".parse::<TargetTransform>().is_err());
        assert_eq!(TargetTransform::Sigmoid.to_string(), "sigmoid");
    }
}
