//! Naive f64 forward pass over a parsed network, written from the layer
//! formulas without sharing any kernel code with the crate under test.

use yolocam_core::model::{LayerInput, LayerKind, NetworkSpec};
use yolocam_core::tensor::{Activation, LayerParams, MaxPool};

#[derive(Debug, Clone)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Map { c, h, w, v }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

/// Pre-activation of a convolution, batchnorm included.
pub fn conv(input: &Map, p: &LayerParams, stride: usize, pad: usize) -> Map {
    let s = p.weights.shape();
    let (o, ci, kh, kw) = (s[0], s[1], s[2], s[3]);
    assert_eq!(ci, input.c);
    let oh = (input.h + 2 * pad - kh) / stride + 1;
    let ow = (input.w + 2 * pad - kw) / stride + 1;
    let wt = p.weights.data();
    let mut out = vec![0.0; o * oh * ow];
    for f in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f64;
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                continue;
                            }
                            acc += wt[((f * ci + c) * kh + ky) * kw + kx] as f64 * input.at(c, iy as usize, ix as usize);
                        }
                    }
                }
                out[(f * oh + y) * ow + x] = match &p.batchnorm {
                    Some(bn) => {
                        let norm = (acc - bn.mean[f] as f64) / (bn.variance[f] as f64 + p.epsilon as f64).sqrt();
                        norm * bn.scale[f] as f64 + bn.shift[f] as f64
                    }
                    None => acc + p.bias[f] as f64,
                };
            }
        }
    }
    Map::new(o, oh, ow, out)
}

/// Applies `act`, appending one pattern bit per leaky unit.
pub fn activate(z: &Map, act: Activation, pattern: &mut Vec<usize>) -> Map {
    let v = z
        .v
        .iter()
        .map(|&x| match act {
            Activation::Linear => x,
            Activation::Leaky { slope } => {
                pattern.push((x >= 0.0) as usize);
                if x >= 0.0 {
                    x
                } else {
                    slope as f64 * x
                }
            }
            Activation::Logistic => 1.0 / (1.0 + (-x).exp()),
        })
        .collect();
    Map::new(z.c, z.h, z.w, v)
}

/// Darknet max pooling; appends each window's winning offset.
pub fn maxpool(input: &Map, pool: &MaxPool, pattern: &mut Vec<usize>) -> Map {
    let oh = (input.h + pool.padding - pool.size) / pool.stride + 1;
    let ow = (input.w + pool.padding - pool.size) / pool.stride + 1;
    let off = (pool.padding / 2) as isize;
    let mut out = Vec::with_capacity(input.c * oh * ow);
    for c in 0..input.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for ky in 0..pool.size {
                    for kx in 0..pool.size {
                        let iy = (y * pool.stride + ky) as isize - off;
                        let ix = (x * pool.stride + kx) as isize - off;
                        if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                            continue;
                        }
                        let v = input.at(c, iy as usize, ix as usize);
                        if v > best.0 {
                            best = (v, ky * pool.size + kx);
                        }
                    }
                }
                pattern.push(best.1);
                out.push(best.0);
            }
        }
    }
    Map::new(input.c, oh, ow, out)
}

pub fn upsample(input: &Map, f: usize) -> Map {
    let (h, w) = (input.h * f, input.w * f);
    let mut out = Vec::with_capacity(input.c * h * w);
    for c in 0..input.c {
        for y in 0..h {
            for x in 0..w {
                out.push(input.at(c, y / f, x / f));
            }
        }
    }
    Map::new(input.c, h, w, out)
}

pub fn concat(parts: &[&Map]) -> Map {
    let (h, w) = (parts[0].h, parts[0].w);
    assert!(parts.iter().all(|p| p.h == h && p.w == w));
    let v = parts.iter().flat_map(|p| p.v.iter().copied()).collect();
    Map::new(parts.iter().map(|p| p.c).sum(), h, w, v)
}

pub struct RefPass {
    pub outputs: Vec<Map>,
    /// Pre-activations of convolution layers (None elsewhere).
    pub pre: Vec<Option<Map>>,
    /// Which piece of each piecewise-linear unit is active.
    pub pattern: Vec<usize>,
}

pub fn forward(spec: &NetworkSpec, input: &Map) -> RefPass {
    let mut outputs: Vec<Map> = Vec::with_capacity(spec.layers.len());
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut pattern = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let src = |at: LayerInput, outputs: &Vec<Map>| match at {
            LayerInput::Image => input.clone(),
            LayerInput::Layer(j) => outputs[j].clone(),
        };
        let first = src(spec.inputs_of(i)[0], &outputs);
        let (out, z) = match &layer.kind {
            LayerKind::Convolutional(c) => {
                let z = conv(&first, layer.params.as_ref().unwrap(), c.stride, c.padding);
                (activate(&z, c.activation, &mut pattern), Some(z))
            }
            LayerKind::MaxPool(p) => (maxpool(&first, p, &mut pattern), None),
            LayerKind::Upsample { stride } => (upsample(&first, *stride), None),
            LayerKind::Route { sources } => {
                let parts: Vec<&Map> = sources.iter().map(|&s| &outputs[s]).collect();
                (concat(&parts), None)
            }
            LayerKind::Yolo(_) => (first, None),
        };
        assert_eq!([out.c, out.h, out.w], layer.output_shape, "layer {i} shape");
        outputs.push(out);
        pre.push(z);
    }
    RefPass { outputs, pre, pattern }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
