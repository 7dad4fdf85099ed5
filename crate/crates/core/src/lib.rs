//! Grad-CAM explanations for the detections of a Tiny-YOLO-v3 style
//! detector.
//!
//! The crate runs a darknet-format network, decodes and suppresses its
//! detections while keeping each survivor's head/cell/anchor provenance,
//! and attributes a detection's objectness or class score to the feature
//! map feeding the head. Raw maps can be min-max normalized per detection,
//! per image or across a whole run, rendered as heatmap overlays, and
//! persisted for later re-rendering.

pub mod detector;
pub mod error;
pub mod fixtures;
pub mod gradcam;
pub mod model;
pub mod normalize;
pub mod persistence;
pub mod pipeline;
pub mod render;
pub mod tensor;

pub use detector::{Detection, NeuronAddress, Target};
pub use error::{Error, Result};
pub use gradcam::{AttributionMap, CamMode, CamOptions, TargetTransform};
pub use model::NetworkSpec;
pub use normalize::NormalizationScope;
pub use tensor::{LayerParams, Tensor};
