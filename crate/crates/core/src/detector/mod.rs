//! Forward pass, head decoding, non-maximum suppression and the mapping
//! from a surviving detection back to the head neurons that produced it.

mod backward;
mod forward;
mod nms;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Anchor, NetworkSpec};
use crate::tensor::{sigmoid, Tensor};

pub use backward::backpropagate;
pub use forward::{forward, ActivationCache, ForwardPass};
pub use nms::{iou, nms};

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.5;
pub const DEFAULT_IOU_THRESHOLD: f32 = 0.45;

/// Offset of the objectness logit inside an anchor's channel block.
pub const OBJECTNESS_OFFSET: usize = 4;
/// Offset of the first class logit inside an anchor's channel block.
pub const CLASS_OFFSET: usize = 5;

/// Axis-aligned box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BoundingBox {
    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BoundingBox {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn clamped(&self, width: f32, height: f32) -> Self {
        BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

/// Which head, cell and anchor produced a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub head_index: usize,
    pub grid_y: usize,
    pub grid_x: usize,
    pub anchor_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f32,
    pub class_id: usize,
    pub class_prob: f32,
    /// `objectness × class_prob`
    pub confidence: f32,
    pub provenance: Provenance,
}

/// A single scalar in a head's output convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronAddress {
    pub layer_index: usize,
    pub channel: usize,
    pub grid_y: usize,
    pub grid_x: usize,
}

/// The detection score being explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "class_id", rename_all = "snake_case")]
pub enum Target {
    Objectness,
    Class(usize),
}

impl Target {
    /// The class score of the detection's own (argmax) class.
    pub fn class_of(d: &Detection) -> Self {
        Target::Class(d.class_id)
    }

    /// Short tag used in file names: `obj` or `cls<k>`.
    pub fn tag(&self) -> String {
        match self {
            Target::Objectness => "obj".to_string(),
            Target::Class(k) => format!("cls{k}"),
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "obj" => Some(Target::Objectness),
            _ => tag.strip_prefix("cls")?.parse().ok().map(Target::Class),
        }
    }
}

/// Decoding parameters of one detection head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMeta {
    pub head_index: usize,
    /// Anchors this head predicts, already selected by the mask.
    pub anchors: Vec<Anchor>,
    pub num_classes: usize,
    pub stride_x: f32,
    pub stride_y: f32,
    pub image_width: f32,
    pub image_height: f32,
}

impl HeadMeta {
    pub fn from_spec(spec: &NetworkSpec, head_index: usize) -> Result<Self> {
        let yolo = spec.yolo(head_index)?;
        let [_, gy, gx] = spec.layers[spec.head_indices[head_index]].output_shape;
        Ok(HeadMeta {
            head_index,
            anchors: yolo.masked_anchors(),
            num_classes: yolo.classes,
            stride_x: spec.input_width as f32 / gx as f32,
            stride_y: spec.input_height as f32 / gy as f32,
            image_width: spec.input_width as f32,
            image_height: spec.input_height as f32,
        })
    }

    fn block(&self) -> usize {
        CLASS_OFFSET + self.num_classes
    }
}

/// Turns a raw head tensor into one candidate per (cell, anchor), labelled
/// with its highest-scoring class. Candidates are emitted row by row, then
/// column, then anchor.
pub fn decode_head(raw: &Tensor, meta: &HeadMeta) -> Result<Vec<Detection>> {
    let (channels, gy, gx) = raw.dims3()?;
    let block = meta.block();
    if channels != meta.anchors.len() * block {
        return Err(Error::shape(
            "decode_head",
            format!("{} × (5 + {}) channels", meta.anchors.len(), meta.num_classes),
            channels,
        ));
    }
    let mut out = Vec::with_capacity(gy * gx * meta.anchors.len());
    for i in 0..gy {
        for j in 0..gx {
            for (a, anchor) in meta.anchors.iter().enumerate() {
                let at = |k: usize| raw.get3(a * block + k, i, j);
                let cx = (j as f32 + sigmoid(at(0))) * meta.stride_x;
                let cy = (i as f32 + sigmoid(at(1))) * meta.stride_y;
                let w = anchor.width * at(2).exp();
                let h = anchor.height * at(3).exp();
                let objectness = sigmoid(at(OBJECTNESS_OFFSET));
                let (class_id, class_prob) = (0..meta.num_classes)
                    .map(|k| (k, sigmoid(at(CLASS_OFFSET + k))))
                    .fold((0, f32::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                out.push(Detection {
                    bbox: BoundingBox::from_center(cx, cy, w, h).clamped(meta.image_width, meta.image_height),
                    objectness,
                    class_id,
                    class_prob,
                    confidence: objectness * class_prob,
                    provenance: Provenance {
                        head_index: meta.head_index,
                        grid_y: i,
                        grid_x: j,
                        anchor_index: a,
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Decodes every head of a forward pass and applies NMS.
pub fn detect(spec: &NetworkSpec, pass: &ForwardPass, conf_threshold: f32, iou_threshold: f32) -> Result<Vec<Detection>> {
    let mut candidates = Vec::new();
    for (h, raw) in pass.head_outputs.iter().enumerate() {
        candidates.extend(decode_head(raw, &HeadMeta::from_spec(spec, h)?)?);
    }
    Ok(nms(&candidates, conf_threshold, iou_threshold))
}

/// Maps a detection's score back to the output neuron that produced it.
pub fn locate_target_neuron(d: &Detection, target: Target, spec: &NetworkSpec) -> Result<NeuronAddress> {
    let p = d.provenance;
    let yolo = spec.yolo(p.head_index)?;
    let layer_index = spec.head_conv(p.head_index)?;
    let [_, gy, gx] = spec.layers[layer_index].output_shape;
    if p.anchor_index >= yolo.anchors_per_head() || p.grid_y >= gy || p.grid_x >= gx {
        return Err(Error::invalid(format!(
            "provenance {p:?} is outside head {} ({} anchors, {gy}×{gx} grid)",
            p.head_index,
            yolo.anchors_per_head()
        )));
    }
    let base = p.anchor_index * yolo.entries_per_anchor();
    let channel = match target {
        Target::Objectness => base + OBJECTNESS_OFFSET,
        Target::Class(k) if k < yolo.classes => base + CLASS_OFFSET + k,
        Target::Class(k) => {
            return Err(Error::invalid(format!("class {k} out of range for a {}-class head", yolo.classes)))
        }
    };
    Ok(NeuronAddress {
        layer_index,
        channel,
        grid_y: p.grid_y,
        grid_x: p.grid_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_network_config, zero_params, REFERENCE_TINY_YOLO_V3_CFG};

    fn meta(anchors: Vec<Anchor>, classes: usize, stride: f32, extent: f32) -> HeadMeta {
        HeadMeta {
            head_index: 0,
            anchors,
            num_classes: classes,
            stride_x: stride,
            stride_y: stride,
            image_width: extent,
            image_height: extent,
        }
    }

    #[test]
    fn zero_logits_decode() {
        let anchors = vec![
            Anchor { width: 4.0, height: 6.0 },
            Anchor { width: 2.0, height: 2.0 },
        ];
        let m = meta(anchors.clone(), 3, 8.0, 64.0);
        let raw = Tensor::zeros(vec![2 * 8, 2, 2]);
        let out = decode_head(&raw, &m).unwrap();
        assert_eq!(out.len(), 8);
        for d in &out {
            assert_eq!(d.objectness, 0.5);
            assert_eq!(d.class_prob, 0.5);
            assert_eq!(d.class_id, 0);
            let p = d.provenance;
            let cx = (p.grid_x as f32 + 0.5) * 8.0;
            let cy = (p.grid_y as f32 + 0.5) * 8.0;
            assert_eq!((d.bbox.x_min + d.bbox.x_max) / 2.0, cx);
            assert_eq!((d.bbox.y_min + d.bbox.y_max) / 2.0, cy);
            assert_eq!(d.bbox.width(), anchors[p.anchor_index].width);
            assert_eq!(d.bbox.height(), anchors[p.anchor_index].height);
        }
    }

    #[test]
    fn saturated_objectness() {
        let m = meta(vec![Anchor { width: 1.0, height: 1.0 }], 1, 1.0, 1.0);
        let mut raw = Tensor::zeros(vec![6, 1, 1]);
        raw.data_mut()[OBJECTNESS_OFFSET] = 20.0;
        let d = &decode_head(&raw, &m).unwrap()[0];
        assert!((d.objectness as f64 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let m = meta(vec![Anchor { width: 1.0, height: 1.0 }], 2, 1.0, 1.0);
        assert!(decode_head(&Tensor::zeros(vec![8, 1, 1]), &m).is_err());
    }

    #[test]
    fn neuron_channels() {
        let spec = parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).unwrap();
        let mut d = Detection {
            bbox: BoundingBox::from_center(10.0, 10.0, 4.0, 4.0),
            objectness: 0.9,
            class_id: 1,
            class_prob: 0.9,
            confidence: 0.81,
            provenance: Provenance {
                head_index: 0,
                grid_y: 3,
                grid_x: 4,
                anchor_index: 0,
            },
        };
        let n = locate_target_neuron(&d, Target::Objectness, &spec).unwrap();
        assert_eq!(n, NeuronAddress { layer_index: 15, channel: 4, grid_y: 3, grid_x: 4 });
        d.provenance.anchor_index = 2;
        d.provenance.head_index = 1;
        let n = locate_target_neuron(&d, Target::class_of(&d), &spec).unwrap();
        assert_eq!((n.layer_index, n.channel), (22, 26));
        assert!(n.channel < 30);
        assert!(locate_target_neuron(&d, Target::Class(7), &spec).is_err());
        d.provenance.anchor_index = 3;
        assert!(locate_target_neuron(&d, Target::Objectness, &spec).is_err());
    }

    #[test]
    fn reference_grids_and_zero_model() {
        let spec = zero_params(parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).unwrap());
        let image = Tensor::filled(vec![3, 416, 416], 0.5);
        let pass = forward(&spec, &image).unwrap();
        assert_eq!(pass.head_outputs[0].shape(), &[30, 13, 13]);
        assert_eq!(pass.head_outputs[1].shape(), &[30, 26, 26]);
        assert!(pass.head_outputs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
        assert!(detect(&spec, &pass, DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD).unwrap().is_empty());
        assert!(forward(&spec, &Tensor::zeros(vec![3, 32, 32])).is_err());
    }

    #[test]
    fn target_tags() {
        for t in [Target::Objectness, Target::Class(0), Target::Class(12)] {
            assert_eq!(Target::from_tag(&t.tag()), Some(t));
        }
        assert_eq!(Target::from_tag("clsx"), None);
    }
}
