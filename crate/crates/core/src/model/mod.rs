//! Network description, darknet-compatible config and weights formats.

mod config;
mod init;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, LayerParams, MaxPool};

pub use config::{emit_canonical, parse_network_config, parse_network_config_with_warnings, ConfigWarning};
pub use init::{randomize_params, zero_params};
pub use weights::{expected_float_count, load_weights, serialize_weights, WEIGHTS_HEADER_WORDS};

/// Reference Tiny-YOLO-v3 topology with five classes.
pub const REFERENCE_TINY_YOLO_V3_CFG: &str = include_str!("../../assets/yolov3-tiny.cfg");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub batch_normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub width: f32,
    pub height: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoloLayer {
    pub classes: usize,
    /// Total anchors listed; `mask` selects the ones this head predicts.
    pub num: usize,
    pub mask: Vec<usize>,
    pub anchors: Vec<Anchor>,
}

impl YoloLayer {
    pub fn anchors_per_head(&self) -> usize {
        self.mask.len()
    }

    /// Channels per anchor: 4 box terms, objectness, one score per class.
    pub fn entries_per_anchor(&self) -> usize {
        5 + self.classes
    }

    pub fn channels(&self) -> usize {
        self.anchors_per_head() * self.entries_per_anchor()
    }

    pub fn masked_anchors(&self) -> Vec<Anchor> {
        self.mask.iter().map(|&m| self.anchors[m]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Convolutional(ConvLayer),
    MaxPool(MaxPool),
    Upsample { stride: usize },
    /// Channel concatenation of earlier layers (absolute indices).
    Route { sources: Vec<usize> },
    Yolo(YoloLayer),
}

impl LayerKind {
    pub fn section_name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional(_) => "convolutional",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Route { .. } => "route",
            LayerKind::Yolo(_) => "yolo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub params: Option<LayerParams>,
    /// `[C, H, W]` produced by this layer.
    pub output_shape: [usize; 3],
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerInput {
    Image,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerNode>,
    pub head_indices: Vec<usize>,
}

impl NetworkSpec {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    /// Layers feeding `index`, in concatenation order for routes.
    pub fn inputs_of(&self, index: usize) -> Vec<LayerInput> {
        match &self.layers[index].kind {
            LayerKind::Route { sources } => sources.iter().map(|&s| LayerInput::Layer(s)).collect(),
            _ if index == 0 => vec![LayerInput::Image],
            _ => vec![LayerInput::Layer(index - 1)],
        }
    }

    pub fn shape_of(&self, input: LayerInput) -> [usize; 3] {
        match input {
            LayerInput::Image => self.input_shape(),
            LayerInput::Layer(i) => self.layers[i].output_shape,
        }
    }

    pub fn yolo(&self, head_index: usize) -> Result<&YoloLayer> {
        let idx = *self
            .head_indices
            .get(head_index)
            .ok_or_else(|| Error::invalid(format!("head {head_index} does not exist ({} heads)", self.head_indices.len())))?;
        match &self.layers[idx].kind {
            LayerKind::Yolo(y) => Ok(y),
            _ => unreachable!("head index points at a yolo layer"),
        }
    }

    /// Index of the 1×1 convolution whose output a head decodes.
    pub fn head_conv(&self, head_index: usize) -> Result<usize> {
        self.yolo(head_index)?;
        Ok(self.head_indices[head_index] - 1)
    }

    /// Head whose output conv is `layer`, if any.
    pub fn head_of_conv(&self, layer: usize) -> Option<usize> {
        self.head_indices.iter().position(|&h| h == layer + 1)
    }

    pub fn conv(&self, index: usize) -> Option<&ConvLayer> {
        match &self.layers.get(index)?.kind {
            LayerKind::Convolutional(c) => Some(c),
            _ => None,
        }
    }

    /// All layers that `index` depends on, transitively (excluding itself).
    pub fn ancestors(&self, index: usize) -> Vec<usize> {
        let mut seen = vec![false; self.layers.len()];
        let mut stack = vec![index];
        while let Some(i) = stack.pop() {
            for input in self.inputs_of(i) {
                if let LayerInput::Layer(j) = input {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        (0..self.layers.len()).filter(|&i| seen[i]).collect()
    }

    pub fn params_loaded(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !matches!(l.kind, LayerKind::Convolutional(_)) || l.params.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_head_layout() {
        let spec = parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).unwrap();
        assert_eq!(spec.layers.len(), 24);
        assert_eq!(spec.head_indices, vec![16, 23]);
        for (head, c_in, grid) in [(0, 512, 13), (1, 256, 26)] {
            let conv_idx = spec.head_conv(head).unwrap();
            let conv = spec.conv(conv_idx).unwrap();
            assert_eq!(conv.size, 1);
            assert_eq!(conv.filters, 30);
            assert_eq!(spec.shape_of(spec.inputs_of(conv_idx)[0])[0], c_in);
            assert_eq!(spec.layers[conv_idx].output_shape, [30, grid, grid]);
        }
        let counts = |name: &str| spec.layers.iter().filter(|l| l.kind.section_name() == name).count();
        assert_eq!(counts("convolutional"), 13);
        assert_eq!(counts("maxpool"), 6);
        assert_eq!(counts("upsample"), 1);
        assert_eq!(counts("route"), 2);
        assert_eq!(counts("yolo"), 2);
    }

    #[test]
    fn ancestors_follow_routes() {
        let spec = parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).unwrap();
        let up = spec.ancestors(22);
        assert!(up.contains(&8) && up.contains(&13) && up.contains(&21));
        assert!(!up.contains(&14) && !up.contains(&15));
    }
}
