//! End-to-end workflows behind the command-line tool: explain one image,
//! explain and persist a directory of images, and re-render a persisted run
//! under a different normalization scope.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use image::{imageops::FilterType, RgbImage};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{detect, forward, locate_target_neuron, Detection, NeuronAddress, Target};
use crate::error::{Error, Result};
use crate::gradcam::{compute_cam, select_target_layer, str_enum, AttributionMap, CamOptions};
use crate::model::{load_weights, parse_network_config, NetworkSpec};
use crate::normalize::{normalize, normalize_values, regroup, Extrema, GroupKey, NormalizationScope, NormalizedMap};
use crate::persistence::{ExplanationRecord, Manifest, RunInfo, RunReader, RunWriter};
use crate::render::{render_explanation, write_png, OutputName, RenderStyle};
use crate::tensor::Tensor;

pub const DETECTIONS_FILE: &str = "detections.json";
pub const PNG_DIR: &str = "png";
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// A network with loaded parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: NetworkSpec,
}

impl Model {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        if spec.head_indices.is_empty() {
            return Err(Error::invalid("network has no detection heads"));
        }
        if !spec.params_loaded() {
            return Err(Error::invalid("network parameters are not loaded"));
        }
        let classes = spec.yolo(0)?.classes;
        if (0..spec.head_indices.len()).any(|h| spec.yolo(h).map(|y| y.classes).ok() != Some(classes)) {
            return Err(Error::invalid("detection heads disagree on the class count"));
        }
        Ok(Model { spec })
    }

    pub fn load(config: &Path, weights: &Path) -> Result<Self> {
        let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
        let spec = parse_network_config(&text)?;
        let bytes = fs::read(weights).map_err(|e| Error::io(weights, e))?;
        Model::new(load_weights(&bytes, spec)?)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.yolo(0).map(|y| y.classes).unwrap_or(0)
    }

    pub fn input_size(&self) -> (u32, u32) {
        (self.spec.input_width as u32, self.spec.input_height as u32)
    }
}

/// Which scores of each detection to explain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelection {
    Objectness,
    Class,
    #[default]
    Both,
}

str_enum!(TargetSelection { Objectness => "objectness", Class => "class", Both => "both" });

impl TargetSelection {
    pub fn targets(self, d: &Detection, class_override: Option<usize>) -> Vec<Target> {
        let class = Target::Class(class_override.unwrap_or(d.class_id));
        match self {
            TargetSelection::Objectness => vec![Target::Objectness],
            TargetSelection::Class => vec![class],
            TargetSelection::Both => vec![Target::Objectness, class],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOptions {
    pub conf_threshold: f32,
    pub iou_threshold: f32,
    pub targets: TargetSelection,
    /// Explain this class instead of each detection's argmax class.
    pub class_override: Option<usize>,
    pub cam: CamOptions,
    pub scopes: Vec<NormalizationScope>,
    /// Keep objectness and class maps in separate normalization pools.
    pub separate_targets: bool,
    pub style: RenderStyle,
    pub class_names: Option<Vec<String>>,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            conf_threshold: crate::detector::DEFAULT_CONF_THRESHOLD,
            iou_threshold: crate::detector::DEFAULT_IOU_THRESHOLD,
            targets: TargetSelection::Both,
            class_override: None,
            cam: CamOptions::default(),
            scopes: vec![NormalizationScope::Detection],
            separate_targets: false,
            style: RenderStyle::default(),
            class_names: None,
        }
    }
}

impl ExplainOptions {
    pub fn validate(&self, model: &Model) -> Result<()> {
        for (name, v) in [("confidence threshold", self.conf_threshold), ("IoU threshold", self.iou_threshold), ("alpha", self.style.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let classes = model.num_classes();
        if let Some(names) = &self.class_names {
            if names.len() != classes {
                return Err(Error::invalid(format!("{} class names given for a {classes}-class model", names.len())));
            }
        }
        if let Some(k) = self.class_override {
            if k >= classes {
                return Err(Error::invalid(format!("class override {k} out of range for a {classes}-class model")));
            }
        }
        if self.scopes.is_empty() {
            return Err(Error::invalid("at least one normalization scope is required"));
        }
        select_target_layer(&model.spec, 0, self.cam.target_layer)?;
        Ok(())
    }

    fn class_name(&self, class_id: usize) -> String {
        self.class_names
            .as_ref()
            .and_then(|n| n.get(class_id).cloned())
            .unwrap_or_else(|| format!("class{class_id}"))
    }
}

/// Reads an image and resizes it (no letterboxing) to the network input.
pub fn load_image(path: &Path, width: u32, height: u32) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(if img.dimensions() == (width, height) {
        img
    } else {
        image::imageops::resize(&img, width, height, FilterType::Triangle)
    })
}

/// `3×H×W` tensor with values in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("non-empty image")
}

/// File name of `path` restricted to `[A-Za-z0-9._-]`.
pub fn image_id_for(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let id: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect();
    match id.trim_start_matches('.') {
        "" => "image".to_string(),
        s => s.to_string(),
    }
}

/// Detections and raw maps for one image.
#[derive(Debug, Clone)]
pub struct ImageExplanation {
    pub image_id: String,
    pub image_path: PathBuf,
    pub base: RgbImage,
    pub detections: Vec<Detection>,
    /// `(detection index, map)` in detection order, targets in request order.
    pub maps: Vec<(usize, AttributionMap)>,
    pub forward_seconds: f64,
    pub cam_seconds: f64,
}

impl ImageExplanation {
    /// Mean wall-clock cost of one explanation (its share of the forward
    /// pass plus its own backward pass and map).
    pub fn seconds_per_explanation(&self) -> Option<f64> {
        (!self.maps.is_empty()).then(|| (self.forward_seconds + self.cam_seconds) / self.maps.len() as f64)
    }

    pub fn records(&self) -> Vec<ExplanationRecord> {
        self.maps
            .iter()
            .map(|(i, m)| ExplanationRecord::from_map(&self.image_id, &self.image_path, *i, &self.detections[*i], m))
            .collect()
    }

    /// Normalizes and renders every map under `scope`, which must be
    /// detection or image (the only pools one image can fill).
    pub fn render(&self, scope: NormalizationScope, opts: &ExplainOptions) -> Result<Vec<(OutputName, RgbImage)>> {
        let maps: Vec<AttributionMap> = self.maps.iter().map(|(_, m)| m.clone()).collect();
        let groups = regroup(&maps, scope, &vec![0; maps.len()], opts.separate_targets)?;
        let mut out = Vec::with_capacity(maps.len());
        for g in &groups {
            for (&member, normalized) in g.members.iter().zip(normalize(g)?) {
                let (det_idx, map) = &self.maps[member];
                let name = OutputName {
                    image_id: self.image_id.clone(),
                    detection_index: *det_idx,
                    target: map.target,
                    scope,
                };
                let img = render_explanation(&self.base, &normalized, &self.detections[*det_idx], map.target, &opts.style)?;
                out.push((member, name, img));
            }
        }
        out.sort_by_key(|(member, ..)| *member);
        Ok(out.into_iter().map(|(_, n, i)| (n, i)).collect())
    }
}

/// Runs detection and computes every requested map for one image.
pub fn explain_image(model: &Model, image_path: &Path, opts: &ExplainOptions) -> Result<ImageExplanation> {
    let (w, h) = model.input_size();
    let base = load_image(image_path, w, h)?;
    let started = Instant::now();
    let pass = forward(&model.spec, &image_to_tensor(&base))?;
    let detections = detect(&model.spec, &pass, opts.conf_threshold, opts.iou_threshold)?;
    let forward_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let mut maps = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        let layer = select_target_layer(&model.spec, d.provenance.head_index, opts.cam.target_layer)?;
        for target in opts.targets.targets(d, opts.class_override) {
            let neuron = locate_target_neuron(d, target, &model.spec)?;
            maps.push((i, compute_cam(&model.spec, &pass.cache, &neuron, layer, opts.cam)?.with_detection_ref(i)));
        }
    }
    Ok(ImageExplanation {
        image_id: image_id_for(image_path),
        image_path: fs::canonicalize(image_path).unwrap_or_else(|_| image_path.to_path_buf()),
        base,
        detections,
        maps,
        forward_seconds,
        cam_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplanationEntry {
    pub target: Target,
    pub neuron: NeuronAddress,
    pub target_layer: usize,
    pub raw_min: f32,
    pub raw_max: f32,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionEntry {
    pub index: usize,
    pub class_name: String,
    #[serde(flatten)]
    pub detection: Detection,
    pub explanations: Vec<ExplanationEntry>,
}

/// Contents of `detections.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ExplainReport {
    pub image_id: String,
    pub image_path: PathBuf,
    pub scopes: Vec<NormalizationScope>,
    pub cam_mode: String,
    pub target_transform: String,
    pub detections: Vec<DetectionEntry>,
}

impl ExplainReport {
    pub fn png_count(&self) -> usize {
        self.detections
            .iter()
            .flat_map(|d| &d.explanations)
            .map(|e| e.files.len())
            .sum()
    }
}

/// Explains one image and writes its overlays and `detections.json` into `out_dir`.
pub fn cmd_explain(model: &Model, image_path: &Path, out_dir: &Path, opts: &ExplainOptions) -> Result<ExplainReport> {
    opts.validate(model)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let expl = explain_image(model, image_path, opts)?;

    let mut scopes = Vec::new();
    for &scope in &opts.scopes {
        let effective = if scope == NormalizationScope::Dataset {
            warn!("dataset scope over a single image is image scope");
            NormalizationScope::Image
        } else {
            scope
        };
        if !scopes.contains(&effective) {
            scopes.push(effective);
        }
    }

    let mut files: Vec<Vec<String>> = vec![Vec::new(); expl.maps.len()];
    for &scope in &scopes {
        for (member, (name, img)) in expl.render(scope, opts)?.into_iter().enumerate() {
            let file = name.file_name();
            write_png(&img, &out_dir.join(&file))?;
            files[member].push(file);
        }
    }

    let mut detections: Vec<DetectionEntry> = expl
        .detections
        .iter()
        .enumerate()
        .map(|(index, d)| DetectionEntry {
            index,
            class_name: opts.class_name(d.class_id),
            detection: d.clone(),
            explanations: Vec::new(),
        })
        .collect();
    for ((det_idx, map), files) in expl.maps.iter().zip(files) {
        detections[*det_idx].explanations.push(ExplanationEntry {
            target: map.target,
            neuron: map.neuron,
            target_layer: map.target_layer,
            raw_min: map.raw_min,
            raw_max: map.raw_max,
            files,
        });
    }
    let report = ExplainReport {
        image_id: expl.image_id,
        image_path: expl.image_path,
        scopes,
        cam_mode: opts.cam.mode.to_string(),
        target_transform: opts.cam.transform.to_string(),
        detections,
    };
    let path = out_dir.join(DETECTIONS_FILE);
    let text = serde_json::to_string_pretty(&report).map_err(|source| Error::Json { path: path.clone(), source })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub explain: ExplainOptions,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageSummary {
    pub image_id: String,
    pub detections: usize,
    pub explanations: usize,
    pub seconds_per_explanation: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub images: Vec<ImageSummary>,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

impl BatchSummary {
    pub fn failed(&self) -> usize {
        self.images.iter().filter(|i| i.error.is_some()).count()
    }

    pub fn mean_seconds_per_explanation(&self) -> Option<f64> {
        let (total, n) = self
            .images
            .iter()
            .filter_map(|i| i.seconds_per_explanation.map(|s| (s * i.explanations as f64, i.explanations)))
            .fold((0.0, 0), |(t, n), (s, k)| (t + s, n + k));
        (n > 0).then(|| total / n as f64)
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    images.sort();
    Ok(images)
}

/// Explains every image in `image_dir`, persisting raw maps to `out_dir`
/// and rendering overlays under `out_dir/png`.
pub fn cmd_batch(model: &Model, image_dir: &Path, out_dir: &Path, opts: &BatchOptions) -> Result<BatchSummary> {
    let eo = &opts.explain;
    eo.validate(model)?;
    let images = list_images(image_dir)?;
    if images.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", image_dir.display())));
    }
    let png_dir = out_dir.join(PNG_DIR);
    fs::create_dir_all(&png_dir).map_err(|e| Error::io(&png_dir, e))?;
    let info = RunInfo {
        cam_mode: eo.cam.mode,
        target_transform: eo.cam.transform,
        input_width: model.spec.input_width,
        input_height: model.spec.input_height,
    };
    let writer = RunWriter::create(out_dir, info)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let local_scopes: Vec<NormalizationScope> = eo
        .scopes
        .iter()
        .copied()
        .filter(|s| *s != NormalizationScope::Dataset)
        .collect();

    let (tx, rx) = mpsc::channel::<ExplanationRecord>();
    let (summaries, writer) = std::thread::scope(|s| {
        let writer_thread = s.spawn(move || -> Result<RunWriter> {
            let mut writer = writer;
            for record in rx {
                writer.write_record(&record)?;
            }
            Ok(writer)
        });
        let summaries: Vec<ImageSummary> = pool.install(|| {
            images
                .par_iter()
                .map_with(tx, |tx, path| {
                    let image_id = image_id_for(path);
                    let outcome = explain_image(model, path, eo).and_then(|expl| {
                        for &scope in &local_scopes {
                            for (name, img) in expl.render(scope, eo)? {
                                write_png(&img, &png_dir.join(name.file_name()))?;
                            }
                        }
                        for record in expl.records() {
                            tx.send(record).map_err(|_| Error::Store("record writer stopped".into()))?;
                        }
                        Ok(expl)
                    });
                    match outcome {
                        Ok(expl) => {
                            info!("{}: {} detections, {} explanations", image_id, expl.detections.len(), expl.maps.len());
                            ImageSummary {
                                image_id,
                                detections: expl.detections.len(),
                                explanations: expl.maps.len(),
                                seconds_per_explanation: expl.seconds_per_explanation(),
                                error: None,
                            }
                        }
                        Err(e) => {
                            warn!("skipping {}: {e}", path.display());
                            ImageSummary {
                                image_id,
                                detections: 0,
                                explanations: 0,
                                seconds_per_explanation: None,
                                error: Some(e.to_string()),
                            }
                        }
                    }
                })
                .collect()
        });
        let writer = writer_thread.join().expect("writer thread panicked");
        (summaries, writer)
    });
    let writer = writer?;
    if summaries.iter().all(|s| s.error.is_some()) {
        return Err(Error::invalid(format!("all {} images failed", summaries.len())));
    }
    let manifest = writer.finish()?;
    let manifest_path = out_dir.join(crate::persistence::MANIFEST_FILE);

    if eo.scopes.contains(&NormalizationScope::Dataset) {
        cmd_renormalize(&manifest_path, NormalizationScope::Dataset, &png_dir, &eo.style, eo.separate_targets)?;
    }
    Ok(BatchSummary {
        images: summaries,
        manifest,
        manifest_path,
    })
}

/// One re-rendered overlay.
#[derive(Debug, Clone)]
pub struct RenderedOutput {
    pub path: PathBuf,
    pub name: OutputName,
    pub normalized_peak: f32,
}

/// Renders every persisted map under `scope` without running the network.
/// Records whose source image is missing are skipped with a warning.
pub fn cmd_renormalize(
    manifest_path: &Path,
    scope: NormalizationScope,
    out_dir: &Path,
    style: &RenderStyle,
    separate_targets: bool,
) -> Result<Vec<RenderedOutput>> {
    let reader = RunReader::open(manifest_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = &reader.manifest().records;
    let run = reader.manifest().run;

    let mut image_index: HashMap<&str, usize> = HashMap::new();
    for e in entries {
        let n = image_index.len();
        image_index.entry(e.image_id.as_str()).or_insert(n);
    }
    let keys: Vec<GroupKey> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| GroupKey::new(scope, i, image_index[e.image_id.as_str()], e.target, separate_targets))
        .collect();
    let mut pools: HashMap<GroupKey, Extrema> = HashMap::new();
    for (key, e) in keys.iter().zip(entries) {
        pools
            .entry(*key)
            .and_modify(|x| *x = x.merge(e.extrema()))
            .or_insert(e.extrema());
    }

    let mut outputs = Vec::new();
    let mut cached: Option<(PathBuf, Option<RgbImage>)> = None;
    for (entry, key) in entries.iter().zip(&keys) {
        let record = reader.read_record(entry, true)?;
        if cached.as_ref().map(|(p, _)| p) != Some(&record.image_path) {
            let img = match load_image(&record.image_path, run.input_width as u32, run.input_height as u32) {
                Ok(img) => Some(img),
                Err(e) => {
                    warn!("skipping records of {}: {e}", record.image_path.display());
                    None
                }
            };
            cached = Some((record.image_path.clone(), img));
        }
        let Some((_, Some(base))) = &cached else { continue };
        let normalized = NormalizedMap {
            height: record.map_shape.0,
            width: record.map_shape.1,
            values: normalize_values(&record.payload, pools[key]),
        };
        let name = OutputName {
            image_id: record.image_id.clone(),
            detection_index: record.detection_index,
            target: record.target,
            scope,
        };
        let path = out_dir.join(name.file_name());
        write_png(&render_explanation(base, &normalized, &record.detection, record.target, style)?, &path)?;
        outputs.push(RenderedOutput {
            path,
            name,
            normalized_peak: normalized.peak(),
        });
    }
    Ok(outputs)
}

impl fmt::Display for ImageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.error, self.seconds_per_explanation) {
            (Some(e), _) => write!(f, "{}: failed ({e})", self.image_id),
            (None, Some(s)) => write!(
                f,
                "{}: {} detections, {} explanations, {:.1} ms/explanation",
                self.image_id,
                self.detections,
                self.explanations,
                s * 1e3
            ),
            (None, None) => write!(f, "{}: {} detections", self.image_id, self.detections),
        }
    }
}

impl FromStr for Model {
    type Err = Error;

    /// Builds a model with zero parameters from config text; mainly useful
    /// for smoke tests.
    fn from_str(text: &str) -> Result<Self> {
        Model::new(crate::model::zero_params(parse_network_config(text)?))
    }
}
