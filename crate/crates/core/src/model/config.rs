use std::fmt::Write as _;

use log::warn;

use super::{Anchor, ConvLayer, LayerKind, LayerNode, NetworkSpec, YoloLayer};
use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Activation, MaxPool, DEFAULT_LEAKY_SLOPE};

const DEFAULT_INPUT_EXTENT: usize = 416;
const DEFAULT_INPUT_CHANNELS: usize = 3;

/// Keys that only matter for training; accepted without a warning.
const TRAINING_KEYS: &[&str] = &[
    "batch",
    "subdivisions",
    "momentum",
    "decay",
    "angle",
    "saturation",
    "exposure",
    "hue",
    "learning_rate",
    "burn_in",
    "max_batches",
    "policy",
    "steps",
    "scales",
    "jitter",
    "ignore_thresh",
    "truth_thresh",
    "random",
];

/// An ignored key found while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigWarning {
    pub line: usize,
    pub section: String,
    pub key: String,
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| Error::Config {
                line: e.line,
                message: format!("`{key}` expects a non-negative integer, got `{}`", e.value),
            }),
        }
    }

    fn usize_opt(&self, key: &str) -> Result<Option<usize>> {
        self.raw(key).map(|_| self.usize_or(key, 0)).transpose()
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.usize_or(key, default)?;
        if v == 0 {
            return Err(Error::Config {
                line: self.raw(key).map_or(self.line, |e| e.line),
                message: format!("`{key}` must be positive"),
            });
        }
        Ok(v)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<(Vec<T>, usize)>> {
        let Some(e) = self.raw(key) else { return Ok(None) };
        let values = e
            .value
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Config {
                    line: e.line,
                    message: format!("`{key}` has an unparseable entry `{s}`"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(Some((values, e.line)))
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            message: format!("[{}] {}", self.name, message.into()),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
        if stripped.is_empty() || stripped.starts_with('#') || stripped.starts_with(';') {
            continue;
        }
        if let Some(name) = stripped.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                line,
                message: format!("malformed section header `{}`", raw.trim()),
            })?;
            sections.push(Section {
                name: name.to_ascii_lowercase(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `key=value`, got `{}`", raw.trim()),
        })?;
        let section = sections.last_mut().ok_or_else(|| Error::Config {
            line,
            message: "key outside of any section".into(),
        })?;
        section.entries.push(Entry {
            key: key.to_ascii_lowercase(),
            value: value.to_string(),
            line,
        });
    }
    Ok(sections)
}

/// Parses a darknet-style network description.
pub fn parse_network_config(text: &str) -> Result<NetworkSpec> {
    let (spec, warnings) = parse_network_config_with_warnings(text)?;
    for w in &warnings {
        warn!("config line {}: ignoring unknown key `{}` in [{}]", w.line, w.key, w.section);
    }
    Ok(spec)
}

/// Like [`parse_network_config`], returning ignored keys instead of logging them.
pub fn parse_network_config_with_warnings(text: &str) -> Result<(NetworkSpec, Vec<ConfigWarning>)> {
    let sections = tokenize(text)?;
    let mut warnings = Vec::new();
    let mut note_unknown = |section: &Section, known: &[&str]| {
        for e in &section.entries {
            if !known.contains(&e.key.as_str()) && !TRAINING_KEYS.contains(&e.key.as_str()) {
                warnings.push(ConfigWarning {
                    line: e.line,
                    section: section.name.clone(),
                    key: e.key.clone(),
                });
            }
        }
    };

    let mut iter = sections.iter().peekable();
    let (mut width, mut height, mut channels) = (DEFAULT_INPUT_EXTENT, DEFAULT_INPUT_EXTENT, DEFAULT_INPUT_CHANNELS);
    if let Some(net) = iter.next_if(|s| matches!(s.name.as_str(), "net" | "network")) {
        note_unknown(net, &["width", "height", "channels"]);
        width = net.positive("width", DEFAULT_INPUT_EXTENT)?;
        height = net.positive("height", DEFAULT_INPUT_EXTENT)?;
        channels = net.positive("channels", DEFAULT_INPUT_CHANNELS)?;
    }

    let mut spec = NetworkSpec {
        input_width: width,
        input_height: height,
        input_channels: channels,
        layers: Vec::new(),
        head_indices: Vec::new(),
    };

    for section in iter {
        let index = spec.layers.len();
        let in_shape = match index {
            0 => spec.input_shape(),
            _ => spec.layers[index - 1].output_shape,
        };
        let node = match section.name.as_str() {
            "convolutional" | "conv" => {
                note_unknown(section, &["filters", "size", "stride", "pad", "padding", "activation", "batch_normalize", "slope"]);
                parse_conv(section, in_shape)?
            }
            "maxpool" | "max" => {
                note_unknown(section, &["size", "stride", "padding"]);
                let stride = section.positive("stride", 1)?;
                let size = section.positive("size", stride)?;
                let padding = section.usize_or("padding", size - 1)?;
                let pool = MaxPool::with_padding(size, stride, padding).map_err(|e| section.error(e.to_string()))?;
                let [c, h, w] = in_shape;
                let oh = pool.output_extent(h).map_err(|e| section.error(e.to_string()))?;
                let ow = pool.output_extent(w).map_err(|e| section.error(e.to_string()))?;
                LayerNode {
                    kind: LayerKind::MaxPool(pool),
                    params: None,
                    output_shape: [c, oh, ow],
                }
            }
            "upsample" => {
                note_unknown(section, &["stride"]);
                let stride = section.positive("stride", 2)?;
                let [c, h, w] = in_shape;
                LayerNode {
                    kind: LayerKind::Upsample { stride },
                    params: None,
                    output_shape: [c, h * stride, w * stride],
                }
            }
            "route" => {
                note_unknown(section, &["layers"]);
                parse_route(section, &spec, index)?
            }
            "yolo" => {
                note_unknown(section, &["mask", "anchors", "classes", "num"]);
                let node = parse_yolo(section, &spec, index)?;
                spec.head_indices.push(index);
                node
            }
            "net" | "network" => return Err(section.error("must be the first section")),
            other => {
                return Err(Error::Config {
                    line: section.line,
                    message: format!("unknown section kind `[{other}]`"),
                })
            }
        };
        spec.layers.push(node);
    }

    if spec.layers.is_empty() {
        return Err(Error::Config {
            line: 0,
            message: "network has no layers".into(),
        });
    }
    Ok((spec, warnings))
}

fn parse_conv(section: &Section, in_shape: [usize; 3]) -> Result<LayerNode> {
    let filters = section.positive("filters", 1)?;
    let size = section.positive("size", 1)?;
    let stride = section.positive("stride", 1)?;
    let padding = match section.usize_opt("padding")? {
        Some(p) => p,
        None if section.usize_or("pad", 0)? != 0 => size / 2,
        None => 0,
    };
    let activation = match section.raw("activation").map(|e| e.value.as_str()).unwrap_or("logistic") {
        "leaky" => {
            let slope = match section.raw("slope") {
                None => DEFAULT_LEAKY_SLOPE,
                Some(e) => e.value.parse().map_err(|_| section.error(format!("bad slope `{}`", e.value)))?,
            };
            Activation::leaky(slope).map_err(|e| section.error(e.to_string()))?
        }
        "linear" => Activation::Linear,
        "logistic" => Activation::Logistic,
        other => return Err(section.error(format!("unsupported activation `{other}`"))),
    };
    let batch_normalize = section.usize_or("batch_normalize", 0)? != 0;
    let [_, h, w] = in_shape;
    let oh = conv_output_extent(h, size, stride, padding).map_err(|e| section.error(e.to_string()))?;
    let ow = conv_output_extent(w, size, stride, padding).map_err(|e| section.error(e.to_string()))?;
    Ok(LayerNode {
        kind: LayerKind::Convolutional(ConvLayer {
            filters,
            size,
            stride,
            padding,
            activation,
            batch_normalize,
        }),
        params: None,
        output_shape: [filters, oh, ow],
    })
}

fn parse_route(section: &Section, spec: &NetworkSpec, index: usize) -> Result<LayerNode> {
    let (refs, line) = section
        .list::<i64>("layers")?
        .ok_or_else(|| section.error("missing `layers`"))?;
    if refs.is_empty() {
        return Err(section.error("`layers` is empty"));
    }
    let mut sources = Vec::with_capacity(refs.len());
    for r in refs {
        let abs = if r < 0 { index as i64 + r } else { r };
        if abs < 0 || abs >= index as i64 {
            return Err(Error::Config {
                line,
                message: format!("route reference {r} resolves to layer {abs}, outside 0..{index}"),
            });
        }
        sources.push(abs as usize);
    }
    let [_, h, w] = spec.layers[sources[0]].output_shape;
    let mut channels = 0;
    for &s in &sources {
        let [c, sh, sw] = spec.layers[s].output_shape;
        if (sh, sw) != (h, w) {
            return Err(Error::Config {
                line,
                message: format!("route sources disagree on spatial size: layer {s} is {sh}×{sw}, expected {h}×{w}"),
            });
        }
        channels += c;
    }
    Ok(LayerNode {
        kind: LayerKind::Route { sources },
        params: None,
        output_shape: [channels, h, w],
    })
}

fn parse_yolo(section: &Section, spec: &NetworkSpec, index: usize) -> Result<LayerNode> {
    let classes = section
        .usize_opt("classes")?
        .ok_or_else(|| section.error("missing `classes`"))?;
    let (values, anchors_line) = section
        .list::<f32>("anchors")?
        .ok_or_else(|| section.error("missing `anchors`"))?;
    let mask = section.list::<usize>("mask")?;
    let num = section.usize_opt("num")?.unwrap_or(values.len() / 2);
    if num == 0 {
        return Err(section.error("`num` must be positive"));
    }
    if values.len() != 2 * num {
        return Err(Error::Config {
            line: anchors_line,
            message: format!("expected {} anchor values for num={num}, found {}", 2 * num, values.len()),
        });
    }
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Config {
            line: anchors_line,
            message: "anchor extents must be positive".into(),
        });
    }
    let anchors: Vec<Anchor> = values
        .chunks_exact(2)
        .map(|p| Anchor {
            width: p[0],
            height: p[1],
        })
        .collect();
    let mask = match mask {
        Some((m, line)) => {
            if m.is_empty() || m.iter().any(|&i| i >= num) {
                return Err(Error::Config {
                    line,
                    message: format!("mask entries must be in 0..{num}"),
                });
            }
            m
        }
        None => (0..num).collect(),
    };
    let yolo = YoloLayer {
        classes,
        num,
        mask,
        anchors,
    };

    let producer = index
        .checked_sub(1)
        .and_then(|p| spec.conv(p).map(|c| (p, c)))
        .ok_or_else(|| section.error("a yolo head must directly follow a convolutional layer"))?;
    if producer.1.filters != yolo.channels() {
        return Err(section.error(format!(
            "producing conv (layer {}) has {} filters, head needs {} × (5 + {}) = {}",
            producer.0,
            producer.1.filters,
            yolo.anchors_per_head(),
            classes,
            yolo.channels()
        )));
    }
    Ok(LayerNode {
        kind: LayerKind::Yolo(yolo),
        params: None,
        output_shape: spec.layers[producer.0].output_shape,
    })
}

/// Writes `spec` back as a config document with every attribute explicit.
pub fn emit_canonical(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "[net]\nwidth={}\nheight={}\nchannels={}",
        spec.input_width, spec.input_height, spec.input_channels
    );
    for layer in &spec.layers {
        let _ = writeln!(out, "\n[{}]", layer.kind.section_name());
        match &layer.kind {
            LayerKind::Convolutional(c) => {
                let activation = match c.activation {
                    Activation::Linear => "linear".to_string(),
                    Activation::Logistic => "logistic".to_string(),
                    Activation::Leaky { slope } if slope == DEFAULT_LEAKY_SLOPE => "leaky".to_string(),
                    Activation::Leaky { slope } => format!("leaky\nslope={slope}"),
                };
                let _ = writeln!(
                    out,
                    "batch_normalize={}\nfilters={}\nsize={}\nstride={}\npadding={}\nactivation={}",
                    u8::from(c.batch_normalize),
                    c.filters,
                    c.size,
                    c.stride,
                    c.padding,
                    activation
                );
            }
            LayerKind::MaxPool(p) => {
                let _ = writeln!(out, "size={}\nstride={}\npadding={}", p.size, p.stride, p.padding);
            }
            LayerKind::Upsample { stride } => {
                let _ = writeln!(out, "stride={stride}");
            }
            LayerKind::Route { sources } => {
                let list: Vec<String> = sources.iter().map(ToString::to_string).collect();
                let _ = writeln!(out, "layers={}", list.join(","));
            }
            LayerKind::Yolo(y) => {
                let mask: Vec<String> = y.mask.iter().map(ToString::to_string).collect();
                let anchors: Vec<String> = y.anchors.iter().map(|a| format!("{},{}", a.width, a.height)).collect();
                let _ = writeln!(
                    out,
                    "mask={}\nanchors={}\nclasses={}\nnum={}",
                    mask.join(","),
                    anchors.join(", "),
                    y.classes,
                    y.num
                );
            }
        }
    }
    out
}
