//! COCO object-detection JSON.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ExportError;
use crate::pipeline::PipelineResult;
use crate::types::{to_absolute, DetectionCategory};

/// Category name to COCO id. Annotations are named by their top class
/// label when the map knows it, otherwise by the detection category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap(pub IndexMap<String, u32>);

impl Default for CategoryMap {
    fn default() -> Self {
        Self(DetectionCategory::ALL.iter().map(|c| (c.name().to_string(), c.id())).collect())
    }
}

impl CategoryMap {
    /// Detection categories first, then `labels` with consecutive ids.
    pub fn with_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut map = Self::default();
        for l in labels {
            let next = map.0.values().max().copied().unwrap_or(0) + 1;
            map.0.entry(l.as_ref().to_string()).or_insert(next);
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub info: CocoInfo,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoInfo {
    pub description: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
    pub supercategory: String,
}

pub fn to_coco(results: &[PipelineResult], category_map: &CategoryMap) -> Result<CocoDocument, ExportError> {
    let mut images = Vec::with_capacity(results.len());
    let mut annotations = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let (width, height) = r.image.dimensions().ok_or_else(|| ExportError::MissingDimensions(r.image.path.clone()))?;
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: r.image.path.to_string_lossy().replace('\\', "/"),
            width,
            height,
        });
        for d in &r.detections {
            let top = d.scores.as_ref().map(|s| s.top().0).filter(|l| category_map.0.contains_key(*l));
            let name = top.unwrap_or(d.detection.category.name());
            let category_id = *category_map.0.get(name).ok_or_else(|| ExportError::UnmappedCategory(name.to_string()))?;
            let p = to_absolute(&d.detection.bbox, width, height);
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id,
                bbox: [p.x as f64, p.y as f64, p.w as f64, p.h as f64],
                area: p.w as f64 * p.h as f64,
                iscrowd: 0,
                score: d.detection.confidence(),
            });
        }
    }
    let categories = category_map
        .0
        .iter()
        .map(|(name, &id)| {
            let supercategory = if DetectionCategory::ALL.iter().any(|c| c.name() == name) { name.clone() } else { "animal".into() };
            CocoCategory { id, name: name.clone(), supercategory }
        })
        .collect();
    Ok(CocoDocument {
        info: CocoInfo { description: "trapkit detections".into(), version: env!("CARGO_PKG_VERSION").into() },
        images,
        annotations,
        categories,
    })
}
