use std::path::PathBuf;
use std::str::FromStr;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{ArgAction, Args, Parser, Subcommand};
use yolocam_core::detector::{DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD};
use yolocam_core::gradcam::{CamMode, CamOptions, TargetTransform};
use yolocam_core::normalize::NormalizationScope;
use yolocam_core::pipeline::{ExplainOptions, TargetSelection};
use yolocam_core::render::{RenderStyle, DEFAULT_ALPHA, DEFAULT_BOX_THICKNESS};

pub const WORKERS_ENV: &str = "YOLOCAM_WORKERS";

/// Grad-CAM explanations for the detections of a YOLO-style detector.
///
/// Every option may also come from a TOML file given with `--config`: keys
/// are option names (`iou-threshold` or `iou_threshold`), either at top
/// level or under an `[explain]`, `[batch]` or `[renormalize]` table.
/// Command-line flags win over the environment, which wins over the file.
#[derive(Debug, Parser)]
#[command(name = "yolocam", version)]
pub struct Cli {
    /// TOML file supplying default option values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log more (-v info, -vv debug). Warnings are always shown.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain every detection in one image.
    Explain(ExplainArgs),
    /// Explain a directory of images and persist the raw maps.
    Batch(BatchArgs),
    /// Re-render a persisted run under another normalization scope.
    Renormalize(RenormalizeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Darknet network config.
    #[arg(long, value_name = "CFG")]
    pub model: PathBuf,

    /// Darknet weights matching the config.
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
}

#[derive(Debug, Args)]
pub struct StyleArgs {
    /// Heatmap opacity over the image.
    #[arg(long, default_value_t = DEFAULT_ALPHA, value_parser = unit_interval)]
    pub alpha: f32,

    /// Width of the detection box outline in pixels (0 hides it).
    #[arg(long, default_value_t = DEFAULT_BOX_THICKNESS)]
    pub box_thickness: u32,
}

impl StyleArgs {
    pub fn style(&self) -> RenderStyle {
        RenderStyle {
            alpha: self.alpha,
            box_thickness: self.box_thickness,
            ..RenderStyle::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainFlags {
    /// Minimum detection confidence (objectness × class probability).
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD, value_parser = unit_interval)]
    pub conf_threshold: f32,

    /// Overlap above which NMS drops the weaker of two same-class boxes.
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD, value_parser = unit_interval)]
    pub iou_threshold: f32,

    /// Scores to explain for each detection.
    #[arg(long, default_value = "both", value_parser = choice::<TargetSelection>(&["objectness", "class", "both"]))]
    pub targets: TargetSelection,

    /// Explain this class index instead of each detection's top class.
    #[arg(long, value_name = "K")]
    pub class: Option<usize>,

    /// Normalization scopes to render (comma-separated).
    #[arg(long, default_value = "detection", value_delimiter = ',', value_parser = scope_parser())]
    pub scope: Vec<NormalizationScope>,

    /// Keep objectness and class maps in separate normalization pools.
    #[arg(long)]
    pub separate_targets: bool,

    /// How gradients weight the feature map.
    #[arg(long, default_value = "classic", value_parser = choice::<CamMode>(&["classic", "elementwise"]))]
    pub cam_mode: CamMode,

    /// Explain the score's sigmoid or its raw logit.
    #[arg(long, default_value = "sigmoid", value_parser = choice::<TargetTransform>(&["sigmoid", "logit"]))]
    pub target_transform: TargetTransform,

    /// Layer index to attribute to [default: the convolution feeding each head].
    #[arg(long, value_name = "LAYER")]
    pub target_layer: Option<usize>,

    /// Comma-separated class names, one per model class [default: class<k>].
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    pub class_names: Option<Vec<String>>,

    #[command(flatten)]
    pub style: StyleArgs,
}

impl ExplainFlags {
    pub fn options(&self) -> ExplainOptions {
        ExplainOptions {
            conf_threshold: self.conf_threshold,
            iou_threshold: self.iou_threshold,
            targets: self.targets,
            class_override: self.class,
            cam: CamOptions {
                mode: self.cam_mode,
                transform: self.target_transform,
                target_layer: self.target_layer,
            },
            scopes: self.scope.clone(),
            separate_targets: self.separate_targets,
            style: self.style.style(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Image to explain.
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,

    /// Directory for the overlays and detections.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    #[command(flatten)]
    pub flags: ExplainFlags,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Directory of images (png, jpg, bmp).
    #[arg(long, value_name = "DIR")]
    pub images: PathBuf,

    /// Run directory: manifest.json, records/ and png/.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Images processed concurrently [default: available CPUs].
    #[arg(long, env = WORKERS_ENV, value_parser = clap::value_parser!(u16).range(1..))]
    pub workers: Option<u16>,

    #[command(flatten)]
    pub flags: ExplainFlags,
}

#[derive(Debug, Args)]
pub struct RenormalizeArgs {
    /// manifest.json of a batch run, or its directory.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,

    /// Normalization scope to render.
    #[arg(long, value_parser = scope_parser())]
    pub scope: NormalizationScope,

    /// Directory for the re-rendered overlays.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Keep objectness and class maps in separate normalization pools.
    #[arg(long)]
    pub separate_targets: bool,

    #[command(flatten)]
    pub style: StyleArgs,
}

fn unit_interval(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn choice<T>(names: &'static [&'static str]) -> impl TypedValueParser<Value = T>
where
    T: FromStr + Clone + Send + Sync + 'static,
    T::Err: std::fmt::Debug,
{
    PossibleValuesParser::new(names).map(|s| s.parse::<T>().expect("every listed value parses"))
}

fn scope_parser() -> impl TypedValueParser<Value = NormalizationScope> {
    choice(&["detection", "image", "dataset"])
}
