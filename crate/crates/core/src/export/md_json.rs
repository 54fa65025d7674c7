//! MegaDetector-batch JSON, the format Timelapse and EcoAssist read.
//!
//! Serialization is canonical: keys in the order the structs declare them,
//! two-space indentation, LF line endings and a trailing newline, with
//! confidences rounded to 3 decimals and box coordinates to 4.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ExportError;
use crate::pipeline::{ClassifiedDetection, ImageOutcome, PipelineResult};
use crate::types::{BBox, ClassScores, Detection, DetectionCategory, ImageRef};

pub const FORMAT_VERSION: &str = "1.4";
pub const CONF_DECIMALS: usize = 3;
pub const BBOX_DECIMALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdDocument {
    pub images: Vec<MdImage>,
    pub detection_categories: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub classification_categories: IndexMap<String, String>,
    pub info: MdInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdInfo {
    pub format_version: String,
    pub generator: String,
}

impl Default for MdInfo {
    fn default() -> Self {
        Self { format_version: FORMAT_VERSION.into(), generator: format!("trapkit {}", env!("CARGO_PKG_VERSION")) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdImage {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_detection_conf: Option<f64>,
    /// `null` for images that failed.
    pub detections: Option<Vec<MdDetection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdDetection {
    pub category: String,
    pub conf: f64,
    pub bbox: [f64; 4],
    /// `(classification category id, probability)`, most probable first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifications: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MdOptions {
    /// File paths are written relative to this directory when set.
    pub relative_to: Option<std::path::PathBuf>,
}

/// Rounds through decimal formatting, which is exact and platform independent.
pub fn round_to(x: f64, decimals: usize) -> f64 {
    let r: f64 = format!("{x:.decimals$}").parse().expect("formatted float parses");
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn file_name(image: &ImageRef, opts: &MdOptions) -> String {
    let path = match &opts.relative_to {
        Some(base) => image.path.strip_prefix(base).unwrap_or(&image.path),
        None => &image.path,
    };
    path.to_string_lossy().replace('\\', "/")
}

impl MdDocument {
    pub fn from_outcomes(outcomes: &[ImageOutcome], opts: &MdOptions) -> Self {
        let mut classes: IndexMap<String, String> = IndexMap::new();
        let mut class_id = |label: &str| -> String {
            if let Some((id, _)) = classes.iter().find(|(_, l)| l.as_str() == label) {
                return id.clone();
            }
            let id = classes.len().to_string();
            classes.insert(id.clone(), label.to_string());
            id
        };
        let mut images = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            match outcome {
                ImageOutcome::Failed { image, error } => images.push(MdImage {
                    file: file_name(image, opts),
                    max_detection_conf: None,
                    detections: None,
                    failure: Some(error.clone()),
                }),
                ImageOutcome::Done(r) => {
                    let detections: Vec<MdDetection> = r
                        .detections
                        .iter()
                        .map(|d| MdDetection {
                            category: d.detection.category.id().to_string(),
                            conf: round_to(d.detection.confidence(), CONF_DECIMALS),
                            bbox: d.detection.bbox.to_array().map(|v| round_to(v, BBOX_DECIMALS)),
                            classifications: d.scores.as_ref().map(|s| {
                                let mut pairs: Vec<(String, f64)> =
                                    s.iter().map(|(l, p)| (class_id(l), round_to(p, CONF_DECIMALS))).collect();
                                // stable: equal probabilities keep label order
                                pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
                                pairs
                            }),
                        })
                        .collect();
                    images.push(MdImage {
                        file: file_name(&r.image, opts),
                        max_detection_conf: Some(round_to(r.max_detection_conf(), CONF_DECIMALS)),
                        detections: Some(detections),
                        failure: None,
                    });
                }
            }
        }
        Self {
            images,
            detection_categories: DetectionCategory::ALL.iter().map(|c| (c.id().to_string(), c.name().to_string())).collect(),
            classification_categories: classes,
            info: MdInfo::default(),
        }
    }

    /// Canonical text form.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, ExportError> {
        let doc: MdDocument = serde_json::from_str(text).map_err(|e| ExportError::Malformed(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self, ExportError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExportError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), ExportError> {
        std::fs::write(path, self.to_json_string()).map_err(|e| ExportError::io(path, e))
    }

    fn validate(&self) -> Result<(), ExportError> {
        let bad = |m: String| Err(ExportError::Malformed(m));
        for img in &self.images {
            match (&img.detections, &img.failure) {
                (None, None) => return bad(format!("{}: neither detections nor failure", img.file)),
                (Some(_), Some(_)) => return bad(format!("{}: both detections and failure", img.file)),
                _ => {}
            }
            for d in img.detections.iter().flatten() {
                if !self.detection_categories.contains_key(&d.category) {
                    return bad(format!("{}: unknown detection category {:?}", img.file, d.category));
                }
                if !(0.0..=1.0).contains(&d.conf) {
                    return bad(format!("{}: conf {} outside [0, 1]", img.file, d.conf));
                }
                if d.bbox.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return bad(format!("{}: bad bbox {:?}", img.file, d.bbox));
                }
                for (id, p) in d.classifications.iter().flatten() {
                    if !self.classification_categories.contains_key(id) {
                        return bad(format!("{}: unknown classification category {id:?}", img.file));
                    }
                    if !(0.0..=1.0).contains(p) {
                        return bad(format!("{}: probability {p} outside [0, 1]", img.file));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rebuilds pipeline outcomes. Rounded probabilities are renormalized;
    /// boxes are clipped to the unit square.
    pub fn to_outcomes(&self, base_dir: Option<&Path>) -> Result<Vec<ImageOutcome>, ExportError> {
        self.images
            .iter()
            .map(|img| {
                let path = match base_dir {
                    Some(b) => b.join(&img.file),
                    None => img.file.clone().into(),
                };
                let image = ImageRef::new(path);
                let Some(dets) = &img.detections else {
                    return Ok(ImageOutcome::Failed { image, error: img.failure.clone().unwrap_or_default() });
                };
                let detections = dets.iter().map(|d| self.detection(&img.file, d)).collect::<Result<Vec<_>, _>>()?;
                Ok(ImageOutcome::Done(PipelineResult::new(image, detections, 0.0)))
            })
            .collect()
    }

    fn detection(&self, file: &str, d: &MdDetection) -> Result<ClassifiedDetection, ExportError> {
        let bad = |m: String| ExportError::Malformed(format!("{file}: {m}"));
        let category: DetectionCategory = d.category.parse().map_err(|e: crate::types::TypeError| bad(e.to_string()))?;
        let [x, y, w, h] = d.bbox;
        let bbox = BBox::clipped(x, y, w, h).ok_or_else(|| bad(format!("degenerate bbox {:?}", d.bbox)))?;
        let detection = Detection::new(bbox, category, d.conf).map_err(|e| bad(e.to_string()))?;
        let scores = match &d.classifications {
            None => None,
            Some(pairs) => {
                let total: f64 = pairs.iter().map(|(_, p)| p).sum();
                let mut labelled: Vec<(usize, String, f64)> = pairs
                    .iter()
                    .map(|(id, p)| {
                        let (idx, _, label) = self.classification_categories.get_full(id).expect("validated");
                        (idx, label.clone(), if total > 0.0 { p / total } else { 1.0 / pairs.len() as f64 })
                    })
                    .collect();
                labelled.sort_by_key(|(idx, _, _)| *idx);
                Some(ClassScores::new(labelled.into_iter().map(|(_, l, p)| (l, p))).map_err(|e| bad(e.to_string()))?)
            }
        };
        Ok(ClassifiedDetection { detection, scores })
    }
}

/// MegaDetector-batch JSON text for completed results.
pub fn to_md_json(results: &[PipelineResult]) -> String {
    let outcomes: Vec<ImageOutcome> = results.iter().cloned().map(ImageOutcome::Done).collect();
    MdDocument::from_outcomes(&outcomes, &MdOptions::default()).to_json_string()
}
