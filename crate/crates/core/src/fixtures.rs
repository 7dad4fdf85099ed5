//! Small synthetic detectors with predictable behaviour, for tests, demos
//! and benchmarks.
//!
//! The square detector reads a 32×32 image on a 4-pixel grid. A gray
//! square filling grid cell `(gy, gx)` with intensity `v` drives channel 0
//! of the target layer to exactly `v` at that cell and to 0 elsewhere, and
//! anchor 0 of the head scores it as
//!
//! ```text
//! objectness logit = 2.5·v − 0.5      class 0 logit = 2.5·v + 2
//! ```
//!
//! so any square with `v ≳ 0.32` becomes one class-0 detection whose box is
//! the 3×3 anchor centred on the cell. Boxes of distinct cells never
//! overlap.

use image::{Rgb, RgbImage};

use crate::model::{parse_network_config, randomize_params, LayerKind, NetworkSpec};
use crate::tensor::LayerParams;

pub const SQUARE_DETECTOR_CFG: &str = "\
[net]
width=32
height=32
channels=3

[convolutional]
filters=4
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
filters=8
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
filters=8
size=1
stride=1
pad=1
activation=leaky

[convolutional]
filters=21
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0,1,2
anchors=3,3, 3,3, 3,3
classes=2
num=3
";

pub const SQUARE_CELL: u32 = 4;
pub const SQUARE_TARGET_LAYER: usize = 4;
pub const SQUARE_OBJ_GAIN: f32 = 2.5;
pub const SQUARE_OBJ_BIAS: f32 = -0.5;
pub const SQUARE_CLASS_GAIN: f32 = 2.5;
pub const SQUARE_CLASS_BIAS: f32 = 2.0;

fn set_weight(p: &mut LayerParams, o: usize, i: usize, y: usize, x: usize, v: f32) {
    let (_, ci, kh, kw) = p.kernel_dims().expect("conv weights");
    p.weights.data_mut()[((o * ci + i) * kh + y) * kw + x] = v;
}

fn clear_filter(p: &mut LayerParams, o: usize) {
    let per = p.weights.len() / p.out_channels();
    p.weights.data_mut()[o * per..(o + 1) * per].fill(0.0);
    p.bias[o] = 0.0;
}

/// The square detector; filters outside the signal path keep seeded random
/// values so the target layer still has several live channels.
pub fn square_detector(seed: u64) -> NetworkSpec {
    let spec = parse_network_config(SQUARE_DETECTOR_CFG).expect("fixture config parses");
    let mut spec = randomize_params(spec, seed);

    let p = params(&mut spec, 0);
    clear_filter(p, 0);
    for c in 0..3 {
        set_weight(p, 0, c, 1, 1, 1.0 / 3.0);
    }
    let p = params(&mut spec, 2);
    clear_filter(p, 0);
    set_weight(p, 0, 0, 1, 1, 1.0);
    let p = params(&mut spec, 4);
    clear_filter(p, 0);
    set_weight(p, 0, 0, 0, 0, 1.0);

    let LayerKind::Yolo(yolo) = &spec.layers[6].kind else { unreachable!() };
    let per_anchor = yolo.entries_per_anchor();
    let p = params(&mut spec, 5);
    for o in 0..p.out_channels() {
        clear_filter(p, o);
    }
    for a in 0..3 {
        p.bias[a * per_anchor + 4] = -10.0;
    }
    p.bias[4] = SQUARE_OBJ_BIAS;
    set_weight(p, 4, 0, 0, 0, SQUARE_OBJ_GAIN);
    p.bias[5] = SQUARE_CLASS_BIAS;
    set_weight(p, 5, 0, 0, 0, SQUARE_CLASS_GAIN);
    p.bias[6] = -3.0;
    set_weight(p, 6, 0, 0, 0, 1.0);
    spec
}

fn params(spec: &mut NetworkSpec, layer: usize) -> &mut LayerParams {
    spec.layers[layer].params.as_mut().expect("randomized")
}

/// Black 32×32 image with a gray square of intensity `v` in each listed
/// `(gy, gx, v)` grid cell.
pub fn square_image(squares: &[(u32, u32, f32)]) -> RgbImage {
    let mut img = RgbImage::new(32, 32);
    for &(gy, gx, v) in squares {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        for y in gy * SQUARE_CELL..(gy + 1) * SQUARE_CELL {
            for x in gx * SQUARE_CELL..(gx + 1) * SQUARE_CELL {
                img.put_pixel(x, y, Rgb([level; 3]));
            }
        }
    }
    img
}
