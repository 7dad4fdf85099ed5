//! Turning normalized maps into pictures: bilinear upscaling to the network
//! input size, a fixed jet-style palette, alpha compositing and box outlines.

use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;

use crate::detector::{BoundingBox, Detection, Target};
use crate::error::{Error, Result};
use crate::normalize::{NormalizationScope, NormalizedMap};

pub const DEFAULT_ALPHA: f32 = 0.5;
pub const DEFAULT_BOX_COLOR: [u8; 3] = [255, 255, 255];
pub const DEFAULT_BOX_THICKNESS: u32 = 2;

/// Bilinear resampling with half-pixel centres: output pixel `d` samples
/// source coordinate `(d + 0.5)·in/out − 0.5`, clamped to the border.
pub fn upscale_bilinear(values: &[f32], height: usize, width: usize, out_width: usize, out_height: usize) -> Result<Vec<f32>> {
    if out_width == 0 || out_height == 0 {
        return Err(Error::invalid(format!("cannot upscale to {out_width}×{out_height}")));
    }
    if height == 0 || width == 0 || values.len() != height * width {
        return Err(Error::shape("upscale", format!("{height}×{width} values"), values.len()));
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_width, width);
    let ys = taps(out_height, height);
    let at = |y: usize, x: usize| values[y * width + x] as f64;
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);

    let mut out = Vec::with_capacity(out_width * out_height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let corners = [at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)];
            let top = lerp(corners[0], corners[1], fx);
            let bottom = lerp(corners[2], corners[3], fx);
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push(lerp(top, bottom, fy).clamp(lo, hi) as f32);
        }
    }
    Ok(out)
}

/// Piecewise-linear colour table over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    stops: Vec<(f32, [u8; 3])>,
}

impl Palette {
    /// Control points must start at 0, end at 1 and increase strictly.
    pub fn new(stops: Vec<(f32, [u8; 3])>) -> Result<Self> {
        let ok = stops.len() >= 2
            && stops[0].0 == 0.0
            && stops[stops.len() - 1].0 == 1.0
            && stops.windows(2).all(|w| w[0].0 < w[1].0);
        if !ok {
            return Err(Error::invalid("palette stops must increase strictly from 0 to 1"));
        }
        Ok(Palette { stops })
    }

    /// Blue → cyan → yellow → red.
    pub fn jet() -> Self {
        Palette {
            stops: vec![
                (0.0, [0, 0, 131]),
                (0.125, [0, 60, 170]),
                (0.375, [5, 255, 255]),
                (0.625, [255, 255, 0]),
                (0.875, [250, 0, 0]),
                (1.0, [128, 0, 0]),
            ],
        }
    }

    /// Colour at `t ∈ [0, 1]`. Channels are truncated toward zero.
    pub fn color(&self, t: f32) -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        let i = self.stops.partition_point(|s| s.0 <= t).clamp(1, self.stops.len() - 1);
        let (t0, c0) = self.stops[i - 1];
        let (t1, c1) = self.stops[i];
        let f = ((t - t0) as f64 / (t1 - t0) as f64).clamp(0.0, 1.0);
        let mut rgb = [0u8; 3];
        for ch in 0..3 {
            let v = c0[ch] as f64 + f * (c1[ch] as f64 - c0[ch] as f64);
            // the epsilon absorbs representation error at exact control values
            rgb[ch] = (v + 1e-9).floor().clamp(0.0, 255.0) as u8;
        }
        rgb
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self::jet()
    }
}

#[derive(Debug, Clone)]
pub struct Colorized {
    pub image: RgbImage,
    /// Inputs that fell outside `[0, 1]` and were clamped.
    pub clamped: usize,
}

pub fn apply_colormap(values: &[f32], width: u32, height: u32, palette: &Palette) -> Result<Colorized> {
    if values.len() != (width * height) as usize {
        return Err(Error::shape("colormap", format!("{width}×{height} values"), values.len()));
    }
    let mut clamped = 0;
    let mut image = RgbImage::new(width, height);
    for (px, &v) in image.pixels_mut().zip(values) {
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
        }
        *px = Rgb(palette.color(if v.is_nan() { 0.0 } else { v }));
    }
    if clamped > 0 {
        warn!("colormap: clamped {clamped} values outside [0, 1]");
    }
    Ok(Colorized { image, clamped })
}

/// `round((1 − alpha)·image + alpha·heat)` per channel.
pub fn overlay(image: &RgbImage, heat: &RgbImage, alpha: f32) -> Result<RgbImage> {
    if image.dimensions() != heat.dimensions() {
        return Err(Error::shape(
            "overlay",
            format!("{:?}", image.dimensions()),
            format!("{:?}", heat.dimensions()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut out = image.clone();
    for (o, h) in out.iter_mut().zip(heat.iter()) {
        *o = ((1.0 - alpha) * *o as f32 + alpha * *h as f32).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Burns a rectangle outline `thickness` pixels wide (growing inward) into
/// `image`. Box corners are rounded to pixel indices and clamped.
pub fn draw_box(image: &mut RgbImage, bbox: &BoundingBox, color: [u8; 3], thickness: u32) {
    let (w, h) = image.dimensions();
    if thickness == 0 || w == 0 || h == 0 {
        return;
    }
    let px = |v: f32, extent: u32| (v.round().max(0.0) as u32).min(extent - 1);
    let (x0, x1) = (px(bbox.x_min, w), px(bbox.x_max, w));
    let (y0, y1) = (px(bbox.y_min, h), px(bbox.y_max, h));
    for k in 0..thickness {
        let (l, r, t, b) = (x0 + k, x1.saturating_sub(k), y0 + k, y1.saturating_sub(k));
        if l > r || t > b {
            break;
        }
        for x in l..=r {
            image.put_pixel(x, t, Rgb(color));
            image.put_pixel(x, b, Rgb(color));
        }
        for y in t..=b {
            image.put_pixel(l, y, Rgb(color));
            image.put_pixel(r, y, Rgb(color));
        }
    }
}

/// A colour-coded map at input resolution.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub rgb: RgbImage,
    pub target: Target,
    pub detection_ref: Option<usize>,
    pub alpha: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderStyle {
    pub alpha: f32,
    pub palette: Palette,
    pub box_color: [u8; 3],
    pub box_thickness: u32,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            alpha: DEFAULT_ALPHA,
            palette: Palette::jet(),
            box_color: DEFAULT_BOX_COLOR,
            box_thickness: DEFAULT_BOX_THICKNESS,
        }
    }
}

pub fn heatmap(map: &NormalizedMap, width: u32, height: u32, target: Target, detection_ref: Option<usize>, style: &RenderStyle) -> Result<Heatmap> {
    let up = upscale_bilinear(&map.values, map.height, map.width, width as usize, height as usize)?;
    Ok(Heatmap {
        rgb: apply_colormap(&up, width, height, &style.palette)?.image,
        target,
        detection_ref,
        alpha: style.alpha,
    })
}

/// Heatmap over `base` with the detection's box on top.
pub fn render_explanation(base: &RgbImage, map: &NormalizedMap, detection: &Detection, target: Target, style: &RenderStyle) -> Result<RgbImage> {
    let (w, h) = base.dimensions();
    let heat = heatmap(map, w, h, target, None, style)?;
    let mut out = overlay(base, &heat.rgb, heat.alpha)?;
    draw_box(&mut out, &detection.bbox, style.box_color, style.box_thickness);
    Ok(out)
}

pub fn write_png(image: &RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// File name of a rendered explanation:
/// `<image_id>_d<detection index, 3+ digits>_<obj|cls<k>>_<scope>.png`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputName {
    pub image_id: String,
    pub detection_index: usize,
    pub target: Target,
    pub scope: NormalizationScope,
}

impl OutputName {
    pub fn file_name(&self) -> String {
        format!(
            "{}_d{:03}_{}_{}.png",
            self.image_id,
            self.detection_index,
            self.target.tag(),
            self.scope
        )
    }

    pub fn parse(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".png")?;
        let mut parts = stem.rsplitn(4, '_');
        let scope = parts.next()?.parse().ok()?;
        let target = Target::from_tag(parts.next()?)?;
        let detection_index = parts.next()?.strip_prefix('d')?.parse().ok()?;
        let image_id = parts.next()?.to_string();
        Some(OutputName {
            image_id,
            detection_index,
            target,
            scope,
        })
    }
}
