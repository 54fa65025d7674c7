//! Boxes and labels drawn onto a copy of the image.

use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::ExportError;
use crate::pipeline::PipelineResult;
use crate::types::{to_absolute, DetectionCategory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub line_width: u32,
    pub draw_labels: bool,
    /// Integer scale of the 8x8 bitmap font.
    pub text_scale: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { line_width: 2, draw_labels: true, text_scale: 1 }
    }
}

pub fn category_color(c: DetectionCategory) -> Rgb<u8> {
    match c {
        DetectionCategory::Animal => Rgb([255, 64, 0]),
        DetectionCategory::Person => Rgb([0, 128, 255]),
        DetectionCategory::Vehicle => Rgb([255, 0, 200]),
    }
}

/// `"category conf"`, plus the top class and its score when classified.
pub fn label_text(d: &crate::pipeline::ClassifiedDetection) -> String {
    let mut s = format!("{} {:.2}", d.detection.category.name(), d.detection.confidence());
    if let Some(scores) = &d.scores {
        let (label, p) = scores.top();
        s.push_str(&format!(" {label} {p:.2}"));
    }
    s
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn rect_outline(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, t: i64, color: Rgb<u8>) {
    for k in 0..t {
        for xx in x..x + w {
            put(img, xx, y + k, color);
            put(img, xx, y + h - 1 - k, color);
        }
        for yy in y..y + h {
            put(img, x + k, yy, color);
            put(img, x + w - 1 - k, yy, color);
        }
    }
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, scale: i64, fg: Rgb<u8>, bg: Rgb<u8>) {
    let glyph_w = 8 * scale;
    for yy in y..y + glyph_w {
        for xx in x..x + glyph_w * s.chars().count() as i64 {
            put(img, xx, yy, bg);
        }
    }
    for (i, ch) in s.chars().enumerate() {
        let Some(glyph) = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')) else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, x + i as i64 * glyph_w + col * scale + dx, y + row as i64 * scale + dy, fg);
                        }
                    }
                }
            }
        }
    }
}

/// Returns a copy of `image` with every detection drawn. Drawing is clipped
/// to the image; an empty result leaves the pixels unchanged.
pub fn annotate(image: &RgbImage, result: &PipelineResult, config: &RenderConfig) -> RgbImage {
    let mut out = image.clone();
    let t = config.line_width.max(1) as i64;
    let scale = config.text_scale.max(1) as i64;
    for d in &result.detections {
        let color = category_color(d.detection.category);
        let p = to_absolute(&d.detection.bbox, image.width(), image.height());
        rect_outline(&mut out, p.x as i64, p.y as i64, p.w as i64, p.h as i64, t, color);
        if config.draw_labels {
            let ty = if p.y as i64 >= 8 * scale { p.y as i64 - 8 * scale } else { p.y as i64 + t };
            text(&mut out, &label_text(d), p.x as i64, ty, scale, Rgb([255, 255, 255]), color);
        }
    }
    out
}

/// Reads the result's image, draws it and writes `out_path` (format from
/// the extension).
pub fn render_annotated(result: &PipelineResult, config: &RenderConfig, out_path: &Path) -> Result<(), ExportError> {
    let src = &result.image.path;
    let img = image::open(src)
        .map_err(|e| ExportError::ImageDecode { path: src.clone(), message: e.to_string() })?
        .to_rgb8();
    annotate(&img, result, config)
        .save(out_path)
        .map_err(|e| ExportError::ImageDecode { path: out_path.to_path_buf(), message: e.to_string() })
}
