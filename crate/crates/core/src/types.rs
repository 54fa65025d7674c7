//! Domain types shared across the toolkit: normalized boxes, detections,
//! class-score distributions and image references.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDateTime;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed on the right/bottom edge of a normalized box.
pub const BBOX_EPSILON: f64 = 1e-6;

/// Tolerance on the sum of a class-score distribution.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("invalid bounding box {0:?}: {1}")]
    InvalidBox([f64; 4], &'static str),
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("class scores must not be empty")]
    EmptyScores,
    #[error("class score for {label:?} is {value}, outside [0, 1]")]
    InvalidScore { label: String, value: f64 },
    #[error("class scores sum to {0}, expected 1")]
    ScoreSum(f64),
    #[error("duplicate class label {0:?}")]
    DuplicateLabel(String),
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    InvalidDimensions(u32, u32),
    #[error("gps coordinate ({lat}, {lon}) out of range")]
    InvalidGps { lat: f64, lon: f64 },
    #[error("unknown detection category {0:?}")]
    UnknownCategory(String),
}

/// Axis-aligned box in normalized image coordinates: `[x_min, y_min, width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    width: f64,
    height: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self, TypeError> {
        let raw = [x_min, y_min, width, height];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::InvalidBox(raw, "non-finite coordinate"));
        }
        if x_min < 0.0 || y_min < 0.0 {
            return Err(TypeError::InvalidBox(raw, "negative origin"));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(TypeError::InvalidBox(raw, "non-positive extent"));
        }
        if x_min + width > 1.0 + BBOX_EPSILON || y_min + height > 1.0 + BBOX_EPSILON {
            return Err(TypeError::InvalidBox(raw, "extends past the image"));
        }
        Ok(Self { x_min, y_min, width, height })
    }

    /// Builds a box from arbitrary coordinates by clipping it to the unit square.
    /// Returns `None` when nothing of positive area remains.
    pub fn clipped(x_min: f64, y_min: f64, width: f64, height: f64) -> Option<Self> {
        let x0 = x_min.clamp(0.0, 1.0);
        let y0 = y_min.clamp(0.0, 1.0);
        let x1 = (x_min + width).clamp(0.0, 1.0);
        let y1 = (y_min + height).clamp(0.0, 1.0);
        Self::new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width, self.height]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = TypeError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(d)?;
        BBox::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = a.x_max().min(b.x_max()) - a.x_min.max(b.x_min);
    let ih = a.y_max().min(b.y_max()) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Box in integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Converts a normalized box to pixels. Coordinates are rounded half away
/// from zero, then clamped so the result lies inside the image with w, h >= 1.
pub fn to_absolute(b: &BBox, width_px: u32, height_px: u32) -> PixelBox {
    let (wp, hp) = (width_px.max(1) as i64, height_px.max(1) as i64);
    let x0 = (b.x_min * wp as f64).round() as i64;
    let y0 = (b.y_min * hp as f64).round() as i64;
    let x1 = (b.x_max() * wp as f64).round() as i64;
    let y1 = (b.y_max() * hp as f64).round() as i64;

    let x = x0.clamp(0, wp - 1);
    let y = y0.clamp(0, hp - 1);
    let w = (x1.min(wp) - x).max(1);
    let h = (y1.min(hp) - y).max(1);
    PixelBox { x: x as u32, y: y as u32, w: w as u32, h: h as u32 }
}

/// Detector output classes. The numeric ids are the ones used by the
/// MegaDetector batch format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionCategory {
    Animal,
    Person,
    Vehicle,
}

impl DetectionCategory {
    pub const ALL: [DetectionCategory; 3] = [Self::Animal, Self::Person, Self::Vehicle];

    pub fn id(self) -> u32 {
        match self {
            Self::Animal => 1,
            Self::Person => 2,
            Self::Vehicle => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Self::Animal),
            2 => Some(Self::Person),
            3 => Some(Self::Vehicle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Animal => "animal",
            Self::Person => "person",
            Self::Vehicle => "vehicle",
        }
    }
}

impl fmt::Display for DetectionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectionCategory {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "animal" | "1" => Ok(Self::Animal),
            "person" | "human" | "2" => Ok(Self::Person),
            "vehicle" | "3" => Ok(Self::Vehicle),
            _ => Err(TypeError::UnknownCategory(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub bbox: BBox,
    pub category: DetectionCategory,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawDetection {
    bbox: BBox,
    category: DetectionCategory,
    confidence: f64,
}

impl TryFrom<RawDetection> for Detection {
    type Error = TypeError;

    fn try_from(r: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(r.bbox, r.category, r.confidence)
    }
}

impl Detection {
    pub fn new(bbox: BBox, category: DetectionCategory, confidence: f64) -> Result<Self, TypeError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(TypeError::InvalidConfidence(confidence));
        }
        Ok(Self { bbox, category, confidence })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Probability distribution over an ordered set of class labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores(IndexMap<String, f64>);

impl ClassScores {
    pub fn new<I, S>(pairs: I) -> Result<Self, TypeError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut map = IndexMap::new();
        for (label, value) in pairs {
            let label = label.into();
            if !(0.0..=1.0).contains(&value) {
                return Err(TypeError::InvalidScore { label, value });
            }
            if map.insert(label.clone(), value).is_some() {
                return Err(TypeError::DuplicateLabel(label));
            }
        }
        if map.is_empty() {
            return Err(TypeError::EmptyScores);
        }
        let sum: f64 = map.values().sum();
        if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
            return Err(TypeError::ScoreSum(sum));
        }
        Ok(Self(map))
    }

    /// Uniform distribution over `labels`.
    pub fn uniform<S: AsRef<str>>(labels: &[S]) -> Result<Self, TypeError> {
        let p = 1.0 / labels.len().max(1) as f64;
        Self::new(labels.iter().map(|l| (l.as_ref().to_string(), p)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.0.get(label).copied()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Highest-scoring label; the first one wins on ties.
    pub fn top(&self) -> (&str, f64) {
        let mut best = self.0.get_index(0).expect("class scores are nonempty");
        for entry in self.0.iter().skip(1) {
            if *entry.1 > *best.1 {
                best = entry;
            }
        }
        (best.0.as_str(), *best.1)
    }

    pub fn max_score(&self) -> f64 {
        self.top().1
    }

    pub fn argmax_index(&self) -> usize {
        let top = self.top().0;
        self.0.get_index_of(top).unwrap_or(0)
    }
}

impl<'de> Deserialize<'de> for ClassScores {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = IndexMap::<String, f64>::deserialize(d)?;
        ClassScores::new(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, TypeError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(TypeError::InvalidGps { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// Reference to an image plus the metadata the dataset tools key on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_time: Option<NaiveDateTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gps: Option<GeoPoint>,
}

impl ImageRef {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            width_px: None,
            height_px: None,
            capture_time: None,
            location_id: None,
            gps: None,
        }
    }

    /// Reads the pixel dimensions from the file header.
    pub fn probe(path: impl AsRef<Path>) -> Result<Self, image::ImageError> {
        let (w, h) = image::image_dimensions(path.as_ref())?;
        Ok(Self::new(path.as_ref()).with_dimensions(w, h).expect("decoded image is non-empty"))
    }

    pub fn with_dimensions(mut self, width_px: u32, height_px: u32) -> Result<Self, TypeError> {
        if width_px == 0 || height_px == 0 {
            return Err(TypeError::InvalidDimensions(width_px, height_px));
        }
        self.width_px = Some(width_px);
        self.height_px = Some(height_px);
        Ok(self)
    }

    pub fn with_capture_time(mut self, t: NaiveDateTime) -> Self {
        self.capture_time = Some(t);
        self
    }

    pub fn with_location(mut self, location_id: impl Into<String>) -> Self {
        self.location_id = Some(location_id.into());
        self
    }

    pub fn with_gps(mut self, gps: GeoPoint) -> Self {
        self.gps = Some(gps);
        self
    }

    pub fn dimensions(&self) -> Option<(u32, u32)> {
        Some((self.width_px?, self.height_px?))
    }
}
