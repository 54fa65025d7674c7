//! Detection, filtering, cropping and classification for single images and
//! batches, plus the confident/review partition used for human review.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Classifier, Detector, LoadedImage};
use crate::types::{BBox, ClassScores, Detection, DetectionCategory, ImageRef};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("backend failed on {path}: {source}")]
    Backend {
        path: PathBuf,
        #[source]
        source: BackendError,
    },
    #[error("degenerate box {0:?}: no pixels left after clamping")]
    DegenerateBox([f64; 4]),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

impl PipelineError {
    fn from_backend(path: &std::path::Path, err: BackendError) -> Self {
        match err {
            BackendError::ImageDecode { path, message } => Self::ImageDecode { path, message },
            other => Self::Backend { path: path.to_path_buf(), source: other },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub det_threshold: f64,
    /// Minimum top class score for a classification to be accepted
    /// without human review.
    pub clf_threshold: f64,
    pub crop_size_px: u32,
    pub classify_categories: BTreeSet<DetectionCategory>,
    /// Upper bound on images processed concurrently by [`run_batch`].
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            det_threshold: 0.2,
            clf_threshold: 0.98,
            crop_size_px: 256,
            classify_categories: BTreeSet::from([DetectionCategory::Animal]),
            workers: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, t) in [("det_threshold", self.det_threshold), ("clf_threshold", self.clf_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(PipelineError::InvalidConfig(format!("{name} = {t} is outside [0, 1]")));
            }
        }
        if self.crop_size_px < 8 {
            return Err(PipelineError::InvalidConfig(format!("crop_size_px = {} is below 8", self.crop_size_px)));
        }
        if self.workers == 0 {
            return Err(PipelineError::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedDetection {
    pub detection: Detection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ClassScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub image: ImageRef,
    pub detections: Vec<ClassifiedDetection>,
    pub is_empty: bool,
    pub needs_review: bool,
}

impl PipelineResult {
    pub fn new(image: ImageRef, detections: Vec<ClassifiedDetection>, clf_threshold: f64) -> Self {
        let mut r = Self { image, is_empty: detections.is_empty(), detections, needs_review: false };
        r.needs_review = r.needs_review_at(clf_threshold);
        r
    }

    /// True when some classified detection's top score is below `threshold`.
    pub fn needs_review_at(&self, threshold: f64) -> bool {
        self.detections.iter().filter_map(|d| d.scores.as_ref()).any(|s| s.max_score() < threshold)
    }

    pub fn max_detection_conf(&self) -> f64 {
        self.detections.iter().map(|d| d.detection.confidence()).fold(0.0, f64::max)
    }

    /// Lowest top-class score over the classified detections, if any.
    pub fn min_classification_score(&self) -> Option<f64> {
        self.detections.iter().filter_map(|d| d.scores.as_ref()).map(ClassScores::max_score).reduce(f64::min)
    }
}

/// Per-image entry of a batch: either a result or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ImageOutcome {
    Done(PipelineResult),
    Failed { image: ImageRef, error: String },
}

impl ImageOutcome {
    pub fn image(&self) -> &ImageRef {
        match self {
            ImageOutcome::Done(r) => &r.image,
            ImageOutcome::Failed { image, .. } => image,
        }
    }

    pub fn result(&self) -> Option<&PipelineResult> {
        match self {
            ImageOutcome::Done(r) => Some(r),
            ImageOutcome::Failed { .. } => None,
        }
    }
}

impl From<PipelineResult> for ImageOutcome {
    fn from(r: PipelineResult) -> Self {
        ImageOutcome::Done(r)
    }
}

/// Square region of `image` around a normalized box, resized to
/// `crop_size_px` square. The box is grown to a square on its longer side,
/// centred on the box, shifted back inside the image where possible and
/// clipped where the square is larger than the image.
pub fn crop_detection(image: &RgbImage, bbox: &BBox, crop_size_px: u32) -> Result<RgbImage, PipelineError> {
    crop_normalized(image, bbox.to_array(), crop_size_px)
}

/// [`crop_detection`] for raw, unvalidated normalized coordinates.
pub fn crop_normalized(image: &RgbImage, raw: [f64; 4], crop_size_px: u32) -> Result<RgbImage, PipelineError> {
    let (x, y, w, h) = square_region(raw, image.width(), image.height()).ok_or(PipelineError::DegenerateBox(raw))?;
    let region = imageops::crop_imm(image, x, y, w, h).to_image();
    Ok(imageops::resize(&region, crop_size_px, crop_size_px, FilterType::Triangle))
}

/// Pixel rectangle `(x, y, w, h)` that [`crop_detection`] samples from.
pub fn square_region(raw: [f64; 4], width_px: u32, height_px: u32) -> Option<(u32, u32, u32, u32)> {
    let [bx, by, bw, bh] = raw;
    if raw.iter().any(|v| !v.is_finite()) || bw <= 0.0 || bh <= 0.0 {
        return None;
    }
    let (iw, ih) = (width_px as f64, height_px as f64);
    let (w, h) = (bw * iw, bh * ih);
    let side = w.max(h);
    let cx = bx * iw + w / 2.0;
    let cy = by * ih + h / 2.0;

    let place = |centre: f64, limit: u32| -> Option<(u32, u32)> {
        let len = (side.round() as i64).max(1);
        let start = (centre - side / 2.0).round() as i64;
        let limit = limit as i64;
        if len >= limit {
            return Some((0, limit as u32));
        }
        let start = start.clamp(0, limit - len);
        Some((start as u32, len as u32))
    };
    let (x, sw) = place(cx, width_px)?;
    let (y, sh) = place(cy, height_px)?;
    if bx * iw >= iw || by * ih >= ih || (bx + bw) <= 0.0 || (by + bh) <= 0.0 || sw == 0 || sh == 0 {
        return None;
    }
    Some((x, y, sw, sh))
}

/// Runs detection and, for the configured categories, classification on one image.
pub fn run_image(
    image: &ImageRef,
    detector: &dyn Detector,
    classifier: Option<&dyn Classifier>,
    config: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    config.validate()?;
    let loaded = LoadedImage::open(image).map_err(|e| PipelineError::from_backend(&image.path, e))?;
    run_loaded(&loaded, &Gate::open(detector), classifier.map(Gate::open).as_ref(), config)
}

/// Serializes calls into backends that do not declare concurrent inference.
struct Gate<'a, T: ?Sized> {
    inner: &'a T,
    lock: Option<Mutex<()>>,
}

impl<'a, T: ?Sized> Gate<'a, T> {
    fn open(inner: &'a T) -> Self {
        Self { inner, lock: None }
    }

    fn with<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let _guard = self.lock.as_ref().map(|l| l.lock().unwrap_or_else(|p| p.into_inner()));
        f(self.inner)
    }
}

fn gate_detector(d: &dyn Detector) -> Gate<'_, dyn Detector + '_> {
    Gate { inner: d, lock: (!d.info().supports_concurrent_inference).then(|| Mutex::new(())) }
}

fn gate_classifier(c: &dyn Classifier) -> Gate<'_, dyn Classifier + '_> {
    Gate { inner: c, lock: (!c.info().supports_concurrent_inference).then(|| Mutex::new(())) }
}

fn run_loaded(
    loaded: &LoadedImage,
    detector: &Gate<'_, dyn Detector + '_>,
    classifier: Option<&Gate<'_, dyn Classifier + '_>>,
    config: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    let path = &loaded.reference.path;
    let mut detections = detector
        .with(|d| d.detect(loaded, config.det_threshold))
        .map_err(|e| PipelineError::from_backend(path, e))?;
    detections.retain(|d| d.confidence() >= config.det_threshold);
    detections.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));

    let mut out = Vec::with_capacity(detections.len());
    for detection in detections {
        let scores = match classifier {
            Some(clf) if config.classify_categories.contains(&detection.category) => {
                let size = clf.inner.input_size_px();
                let crop = crop_detection(&loaded.pixels, &detection.bbox, size)?;
                Some(clf.with(|c| c.classify(&crop)).map_err(|e| PipelineError::from_backend(path, e))?)
            }
            _ => None,
        };
        out.push(ClassifiedDetection { detection, scores });
    }
    Ok(PipelineResult::new(loaded.reference.clone(), out, config.clf_threshold))
}

/// Progress callback receiving `(completed, total)`.
pub type ProgressSink<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Runs the pipeline over `images`. Failures are recorded per image and do
/// not abort the batch; outcomes are returned in input order. The progress
/// sink sees `1, 2, ..., n` exactly once each.
pub fn run_batch(
    images: &[ImageRef],
    detector: &dyn Detector,
    classifier: Option<&dyn Classifier>,
    config: &PipelineConfig,
    progress: ProgressSink<'_>,
) -> Result<Vec<ImageOutcome>, PipelineError> {
    if images.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    config.validate()?;
    let det = gate_detector(detector);
    let clf = classifier.map(gate_classifier);
    let total = images.len();
    let next = AtomicUsize::new(0);
    let done = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<ImageOutcome>>> = images.iter().map(|_| Mutex::new(None)).collect();

    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= total {
            break;
        }
        let image = &images[i];
        let outcome = LoadedImage::open(image)
            .map_err(|e| PipelineError::from_backend(&image.path, e))
            .and_then(|loaded| run_loaded(&loaded, &det, clf.as_ref(), config));
        let outcome = match outcome {
            Ok(r) => ImageOutcome::Done(r),
            Err(e) => {
                log::warn!("{}: {e}", image.path.display());
                ImageOutcome::Failed { image: image.clone(), error: e.to_string() }
            }
        };
        *slots[i].lock().expect("slot lock") = Some(outcome);
        let mut count = done.lock().expect("progress lock");
        *count += 1;
        progress(*count, total);
    };

    let workers = config.workers.min(total);
    if workers <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(&work);
            }
        });
    }
    Ok(slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every slot filled")).collect())
}

/// Results split by whether a human has to look at them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Triage<'a> {
    pub confident: Vec<&'a PipelineResult>,
    pub review: Vec<&'a PipelineResult>,
}

pub fn triage(results: &[PipelineResult], clf_threshold: f64) -> Triage<'_> {
    let (review, confident) = results.iter().partition(|r| r.needs_review_at(clf_threshold));
    Triage { confident, review }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::oracle::{write_sidecar, SidecarObject};
    use crate::backends::{install_oracle_models, load_backend, OracleDetectorConfig};
    use image::Rgb;
    use std::path::Path;
    use std::sync::Arc;

    fn solid_square(image: &mut RgbImage, b: &BBox, color: [u8; 3]) {
        let (w, h) = (image.width() as f64, image.height() as f64);
        for y in (b.y_min() * h) as u32..(b.y_max() * h) as u32 {
            for x in (b.x_min() * w) as u32..(b.x_max() * w) as u32 {
                image.put_pixel(x, y, Rgb(color));
            }
        }
    }

    fn write_scene(dir: &Path, name: &str, objects: &[(BBox, DetectionCategory, [u8; 3])]) -> ImageRef {
        let path = dir.join(name);
        let mut img = RgbImage::from_pixel(200, 160, Rgb([90, 90, 90]));
        let mut sidecar = Vec::new();
        for (b, cat, color) in objects {
            solid_square(&mut img, b, *color);
            sidecar.push(SidecarObject { bbox: *b, category: *cat, label: String::new(), confidence: None });
        }
        img.save(&path).unwrap();
        write_sidecar(&path, &sidecar).unwrap();
        ImageRef::new(path)
    }

    struct Models {
        det: Arc<dyn Detector>,
        clf: Arc<dyn Classifier>,
        _dir: tempfile::TempDir,
    }

    fn models() -> Models {
        let dir = tempfile::tempdir().unwrap();
        let (d, c) = install_oracle_models(dir.path(), &OracleDetectorConfig::default(), &["opossum", "other", "bird"]).unwrap();
        Models {
            det: load_backend(&d).unwrap().detector().unwrap(),
            clf: load_backend(&c).unwrap().classifier().unwrap(),
            _dir: dir,
        }
    }

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn crop_already_square() {
        let img = RgbImage::from_fn(400, 400, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let crop = crop_detection(&img, &b(0.25, 0.25, 0.5, 0.5), 256).unwrap();
        let expected = imageops::resize(&imageops::crop_imm(&img, 100, 100, 200, 200).to_image(), 256, 256, FilterType::Triangle);
        assert_eq!(crop, expected);
    }

    #[test]
    fn crop_expands_to_square_and_clamps_top() {
        // 200x100 box at the origin: square of 200 centred at y=50 would start
        // at y=-50, so it is shifted down to y=0.
        assert_eq!(square_region([0.0, 0.0, 0.5, 0.25], 400, 400), Some((0, 0, 200, 200)));
        // same box lower down keeps its centre
        assert_eq!(square_region([0.0, 0.5, 0.5, 0.25], 400, 400), Some((0, 150, 200, 200)));
        // larger than the image on one axis: clipped to the image
        assert_eq!(square_region([0.0, 0.0, 1.0, 0.5], 400, 200), Some((0, 0, 400, 200)));
        let img = RgbImage::new(400, 400);
        assert_eq!(crop_detection(&img, &b(0.0, 0.0, 0.5, 0.25), 256).unwrap().dimensions(), (256, 256));
    }

    #[test]
    fn degenerate_box() {
        let img = RgbImage::new(400, 400);
        assert!(matches!(crop_normalized(&img, [0.1, 0.1, 0.0, 0.2], 256), Err(PipelineError::DegenerateBox(_))));
        assert!(matches!(crop_normalized(&img, [1.2, 0.1, 0.1, 0.2], 256), Err(PipelineError::DegenerateBox(_))));
    }

    #[test]
    fn run_image_classifies_animals_only() {
        let m = models();
        let dir = tempfile::tempdir().unwrap();
        let two = write_scene(
            dir.path(),
            "two.png",
            &[
                (b(0.1, 0.1, 0.3, 0.3), DetectionCategory::Animal, [255, 0, 0]),
                (b(0.6, 0.5, 0.3, 0.3), DetectionCategory::Animal, [0, 255, 0]),
            ],
        );
        let cfg = PipelineConfig::default();
        let r = run_image(&two, m.det.as_ref(), Some(m.clf.as_ref()), &cfg).unwrap();
        assert_eq!(r.detections.len(), 2);
        assert!(r.detections.iter().all(|d| d.scores.is_some()));
        let tops: Vec<_> = r.detections.iter().map(|d| d.scores.as_ref().unwrap().top().0.to_string()).collect();
        assert!(tops.contains(&"opossum".to_string()) && tops.contains(&"other".to_string()));
        assert!(!r.is_empty);
        assert_eq!(r.image.dimensions(), Some((200, 160)));

        let person = write_scene(dir.path(), "person.png", &[(b(0.2, 0.2, 0.3, 0.5), DetectionCategory::Person, [0, 0, 255])]);
        let r = run_image(&person, m.det.as_ref(), Some(m.clf.as_ref()), &cfg).unwrap();
        assert_eq!(r.detections.len(), 1);
        assert!(r.detections[0].scores.is_none());
        assert!(!r.needs_review);

        let empty = write_scene(dir.path(), "empty.png", &[]);
        let r = run_image(&empty, m.det.as_ref(), Some(m.clf.as_ref()), &cfg).unwrap();
        assert!(r.is_empty && !r.needs_review);
    }

    #[test]
    fn batch_keeps_order_and_survives_corrupt_files() {
        let m = models();
        let dir = tempfile::tempdir().unwrap();
        let mut images: Vec<ImageRef> = (0..6)
            .map(|i| write_scene(dir.path(), &format!("img{i}.png"), &[(b(0.1, 0.1, 0.2, 0.2), DetectionCategory::Animal, [255, 0, 0])]))
            .collect();
        let corrupt = dir.path().join("broken.png");
        std::fs::write(&corrupt, b"not a png").unwrap();
        images.insert(2, ImageRef::new(&corrupt));

        let seen = Mutex::new(Vec::new());
        let cfg = PipelineConfig { workers: 3, ..Default::default() };
        let out = run_batch(&images, m.det.as_ref(), Some(m.clf.as_ref()), &cfg, &|done, total| {
            seen.lock().unwrap().push((done, total));
        })
        .unwrap();
        assert_eq!(out.len(), 7);
        for (o, i) in out.iter().zip(&images) {
            assert_eq!(o.image().path, i.path);
        }
        assert!(matches!(out[2], ImageOutcome::Failed { .. }));
        assert_eq!(out.iter().filter(|o| o.result().is_some()).count(), 6);
        assert_eq!(*seen.lock().unwrap(), (1..=7).map(|d| (d, 7)).collect::<Vec<_>>());
    }

    #[test]
    fn empty_batch_rejected() {
        let m = models();
        let err = run_batch(&[], m.det.as_ref(), None, &PipelineConfig::default(), &|_, _| {});
        assert!(matches!(err, Err(PipelineError::EmptyBatch)));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = PipelineConfig { crop_size_px: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { det_threshold: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn scored(score: f64) -> PipelineResult {
        let det = Detection::new(b(0.1, 0.1, 0.2, 0.2), DetectionCategory::Animal, 0.9).unwrap();
        let scores = ClassScores::new([("a", score), ("b", 1.0 - score)]).unwrap();
        PipelineResult::new(ImageRef::new("x.png"), vec![ClassifiedDetection { detection: det, scores: Some(scores) }], 0.98)
    }

    #[test]
    fn triage_partition_counts() {
        // 900 results with top score 0.99, 100 with 0.9
        let results: Vec<_> = (0..1000).map(|i| scored(if i < 900 { 0.99 } else { 0.9 })).collect();
        let t = triage(&results, 0.98);
        assert_eq!((t.confident.len(), t.review.len()), (900, 100));
        assert!(triage(&results, 0.0).review.is_empty());
        let t = triage(&results[..1], 1.0);
        assert_eq!(t.review.len(), 1);
    }
}
