//! Random network configurations and a finite-difference gradient checker.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use yolocam_core::detector::{backpropagate, forward};
use yolocam_core::model::{parse_network_config, randomize_params, LayerInput, LayerKind, NetworkSpec};
use yolocam_core::tensor::Tensor;

use super::reference::{self, Map};

fn conv_section(out: &mut String, filters: usize, size: usize, stride: usize, bn: bool, act: &str) {
    let _ = write!(
        out,
        "\n[convolutional]\nbatch_normalize={}\nfilters={filters}\nsize={size}\nstride={stride}\npad=1\nactivation={act}\n",
        bn as u8
    );
}

/// 2 to 5 layers drawn from conv/maxpool/upsample/route on an input of at
/// most 3×16×16.
pub fn random_toy_config(rng: &mut impl Rng) -> String {
    let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(4..=16), rng.gen_range(4..=16));
    let mut cfg = format!("[net]\nwidth={w}\nheight={h}\nchannels={c}\n");
    let mut shapes: Vec<[usize; 3]> = Vec::new();
    let mut cur = [c, h, w];
    for i in 0..rng.gen_range(2..=5) {
        loop {
            match rng.gen_range(0..10) {
                0..=3 => {
                    let size = *[1, 3].choose(rng).unwrap();
                    let can_stride = (cur[1] - 1) % 2 == 0 && (cur[2] - 1) % 2 == 0 && cur[1] >= 3 && cur[2] >= 3;
                    let stride = if can_stride && rng.gen_bool(0.5) { 2 } else { 1 };
                    let filters = rng.gen_range(1..=6);
                    let act = *["leaky", "linear", "logistic"].choose(rng).unwrap();
                    conv_section(&mut cfg, filters, size, stride, rng.gen_bool(0.5), act);
                    let pad = size / 2;
                    cur = [filters, (cur[1] + 2 * pad - size) / stride + 1, (cur[2] + 2 * pad - size) / stride + 1];
                }
                4 | 5 => {
                    let (size, stride) = *[(2, 2), (2, 1), (3, 1), (3, 2)].choose(rng).unwrap();
                    if cur[1] < 2 || cur[2] < 2 {
                        continue;
                    }
                    let _ = write!(cfg, "\n[maxpool]\nsize={size}\nstride={stride}\n");
                    cur = [cur[0], (cur[1] - 1) / stride + 1, (cur[2] - 1) / stride + 1];
                }
                6 => {
                    if cur[1] * 2 > 24 || cur[2] * 2 > 24 {
                        continue;
                    }
                    cfg.push_str("\n[upsample]\nstride=2\n");
                    cur = [cur[0], cur[1] * 2, cur[2] * 2];
                }
                _ => {
                    if i == 0 {
                        continue;
                    }
                    let partners: Vec<usize> = (0..i - 1).filter(|&j| shapes[j][1..] == cur[1..]).collect();
                    match partners.choose(rng) {
                        Some(&j) if rng.gen_bool(0.7) => {
                            let _ = write!(cfg, "\n[route]\nlayers=-1,{}\n", j);
                            cur = [cur[0] + shapes[j][0], cur[1], cur[2]];
                        }
                        _ if i >= 2 && rng.gen_bool(0.5) => {
                            cfg.push_str("\n[route]\nlayers=-2\n");
                            cur = shapes[i - 2];
                        }
                        _ => cfg.push_str("\n[route]\nlayers=-1\n"),
                    }
                }
            }
            break;
        }
        shapes.push(cur);
    }
    cfg
}

/// A detector with one or two heads, 1–4 classes and 1–3 anchors per head.
pub fn random_detector_config(rng: &mut impl Rng) -> String {
    let side = *[16, 32].choose(rng).unwrap();
    let classes = rng.gen_range(1..=4);
    let per_head = rng.gen_range(1..=3);
    let two_heads = rng.gen_bool(0.5);
    let num = if two_heads { 2 * per_head } else { per_head };
    let anchors: Vec<String> = (0..num)
        .map(|_| format!("{},{}", rng.gen_range(2..side), rng.gen_range(2..side)))
        .collect();
    let anchors = anchors.join(", ");
    let head_filters = per_head * (5 + classes);
    let mask = |from: usize| (from..from + per_head).map(|m| m.to_string()).collect::<Vec<_>>().join(",");
    let yolo = |cfg: &mut String, from: usize| {
        let _ = write!(cfg, "\n[yolo]\nmask={}\nanchors={anchors}\nclasses={classes}\nnum={num}\n", mask(from));
    };

    let mut cfg = format!("[net]\nwidth={side}\nheight={side}\nchannels=3\n");
    conv_section(&mut cfg, rng.gen_range(2..=6), 3, 1, true, "leaky");
    cfg.push_str("\n[maxpool]\nsize=2\nstride=2\n");
    conv_section(&mut cfg, rng.gen_range(2..=8), 3, 1, true, "leaky");
    conv_section(&mut cfg, head_filters, 1, 1, false, "linear");
    yolo(&mut cfg, if two_heads { per_head } else { 0 });
    if two_heads {
        cfg.push_str("\n[route]\nlayers=-3\n\n[upsample]\nstride=2\n\n[route]\nlayers=-1,0\n");
        conv_section(&mut cfg, rng.gen_range(2..=6), 3, 1, true, "leaky");
        conv_section(&mut cfg, head_filters, 1, 1, false, "linear");
        yolo(&mut cfg, 0);
    }
    cfg
}

pub fn build(cfg: &str, seed: u64) -> NetworkSpec {
    let spec = parse_network_config(cfg).unwrap_or_else(|e| panic!("{e}\n{cfg}"));
    randomize_params(spec, seed)
}

pub fn random_input(rng: &mut impl Rng, shape: [usize; 3]) -> Vec<f32> {
    (0..shape.iter().product()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn to_map(shape: [usize; 3], v: &[f32]) -> Map {
    Map::new(shape[0], shape[1], shape[2], v.iter().map(|&x| x as f64).collect())
}

/// Names of the layer kinds present, for coverage bookkeeping.
pub fn kinds(spec: &NetworkSpec) -> Vec<&'static str> {
    let mut out = Vec::new();
    for layer in &spec.layers {
        let k = match &layer.kind {
            LayerKind::Convolutional(c) if c.batch_normalize => "conv+batchnorm",
            LayerKind::Convolutional(_) => "conv",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Route { sources } if sources.len() > 1 => "concat",
            LayerKind::Route { .. } => "route",
            LayerKind::Yolo(_) => "yolo",
        };
        out.push(k);
        if let LayerKind::Convolutional(c) = &layer.kind {
            out.push(match c.activation {
                yolocam_core::tensor::Activation::Linear => "linear",
                yolocam_core::tensor::Activation::Leaky { .. } => "leaky",
                yolocam_core::tensor::Activation::Logistic => "logistic",
            });
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct FdOutcome {
    pub checked: usize,
    pub skipped: usize,
    /// Worst relative error among entries with magnitude above
    /// `SIGNIFICANT`, where the absolute tolerance cannot mask a mismatch.
    pub worst_rel: f64,
    pub significant: usize,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_TOL: f64 = 1e-5;
pub const SIGNIFICANT: f64 = 1e-3;

/// `(passes, relative error)`.
pub fn grad_close(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let rel = diff / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
    (diff < FD_ABS_TOL || rel < FD_REL_TOL, rel)
}

/// Checks the gradient of `Σ r·output(last layer)` with respect to the
/// input at up to `max_entries` positions. Entries whose perturbation
/// crosses a kink (a leaky sign flip or a change of pool winner) are
/// skipped.
pub fn check_input_gradient(spec: &NetworkSpec, input: &[f32], r: &[f64], max_entries: usize, rng: &mut impl Rng) -> FdOutcome {
    let last = spec.layers.len() - 1;
    let shape = spec.input_shape();
    let pass = forward(spec, &Tensor::new(shape.to_vec(), input.to_vec()).unwrap()).unwrap();
    let seed = Tensor::new(
        pass.cache.outputs[last].shape().to_vec(),
        r.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let analytic = backpropagate(spec, &pass.cache, last, seed, LayerInput::Image).unwrap();

    let base = to_map(shape, input);
    let base_pattern = reference::forward(spec, &base).pattern;
    let objective = |m: &Map| -> (f64, Vec<usize>) {
        let p = reference::forward(spec, m);
        (p.outputs[last].v.iter().zip(r).map(|(a, b)| a * b).sum(), p.pattern)
    };

    let mut entries: Vec<usize> = (0..input.len()).collect();
    entries.shuffle(rng);
    entries.truncate(max_entries);
    let mut out = FdOutcome::default();
    for &e in &entries {
        let mut plus = base.clone();
        plus.v[e] += FD_STEP;
        let mut minus = base.clone();
        minus.v[e] -= FD_STEP;
        let (lp, pp) = objective(&plus);
        let (lm, pm) = objective(&minus);
        if pp != base_pattern || pm != base_pattern {
            out.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let a = analytic.data()[e] as f64;
        let (ok, rel) = grad_close(a, numeric);
        out.checked += 1;
        if a.abs().max(numeric.abs()) >= SIGNIFICANT {
            out.significant += 1;
            out.worst_rel = out.worst_rel.max(rel);
        }
        if !ok {
            out.failures.push(format!("entry {e}: analytic {a:e}, numeric {numeric:e}"));
        }
    }
    out
}
