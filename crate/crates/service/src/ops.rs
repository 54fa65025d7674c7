//! Operations used by both the CLI and the HTTP handlers, so the two
//! produce identical documents.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use trapkit::backends::{load_backend, BackendError, Classifier, Detector, ModelManifest, ModelTask, ModelZoo};
use trapkit::export::{MdDocument, MdOptions};
use trapkit::pipeline::{run_batch, triage, PipelineConfig, PipelineError, ProgressSink};
use trapkit::video::{classify_video, open_video, VideoError, VideoResult};
use trapkit::ImageRef;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown model {0:?}")]
    Unknown(String),
    #[error("model {id} cannot be loaded: {message}")]
    NotLoaded { id: String, message: String },
    #[error("model {id} is a {actual:?}, not a {expected:?}")]
    WrongTask { id: String, expected: ModelTask, actual: ModelTask },
}

/// Zoo-backed cache of loaded backends.
pub struct ModelRegistry {
    zoo: ModelZoo,
    detectors: Mutex<HashMap<String, Arc<dyn Detector>>>,
    classifiers: Mutex<HashMap<String, Arc<dyn Classifier>>>,
}

impl ModelRegistry {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        Ok(Self { zoo: ModelZoo::open(dir)?, detectors: Mutex::default(), classifiers: Mutex::default() })
    }

    pub fn zoo(&self) -> &ModelZoo {
        &self.zoo
    }

    pub fn list(&self) -> Result<Vec<ModelManifest>, BackendError> {
        self.zoo.list()
    }

    fn manifest(&self, id: &str, expected: ModelTask) -> Result<ModelManifest, ModelError> {
        let m = match self.zoo.get(id) {
            Ok(m) => m,
            Err(BackendError::UnknownModel(_)) => return Err(ModelError::Unknown(id.to_string())),
            Err(e) => return Err(ModelError::NotLoaded { id: id.to_string(), message: e.to_string() }),
        };
        if m.task != expected {
            return Err(ModelError::WrongTask { id: id.to_string(), expected, actual: m.task });
        }
        Ok(m)
    }

    pub fn detector(&self, id: &str) -> Result<Arc<dyn Detector>, ModelError> {
        if let Some(d) = self.detectors.lock().get(id) {
            return Ok(Arc::clone(d));
        }
        let m = self.manifest(id, ModelTask::Detector)?;
        let not_loaded = |e: BackendError| ModelError::NotLoaded { id: id.to_string(), message: e.to_string() };
        let d = load_backend(&m).map_err(not_loaded)?.detector().expect("task checked");
        self.detectors.lock().insert(id.to_string(), Arc::clone(&d));
        Ok(d)
    }

    pub fn classifier(&self, id: &str) -> Result<Arc<dyn Classifier>, ModelError> {
        if let Some(c) = self.classifiers.lock().get(id) {
            return Ok(Arc::clone(c));
        }
        let m = self.manifest(id, ModelTask::Classifier)?;
        let not_loaded = |e: BackendError| ModelError::NotLoaded { id: id.to_string(), message: e.to_string() };
        let c = load_backend(&m).map_err(not_loaded)?.classifier().expect("task checked");
        self.classifiers.lock().insert(id.to_string(), Arc::clone(&c));
        Ok(c)
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files under `dir`, recursively, sorted by path.
pub fn collect_images(dir: &Path) -> std::io::Result<Vec<ImageRef>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if is_image(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out.into_iter().map(ImageRef::new).collect())
}

/// Runs the pipeline over `images` and renders the MegaDetector-batch
/// document with paths relative to `root`.
pub fn batch_document(
    images: &[ImageRef],
    root: &Path,
    detector: &dyn Detector,
    classifier: Option<&dyn Classifier>,
    config: &PipelineConfig,
    progress: ProgressSink<'_>,
) -> Result<String, PipelineError> {
    let outcomes = run_batch(images, detector, classifier, config, progress)?;
    Ok(MdDocument::from_outcomes(&outcomes, &MdOptions { relative_to: Some(root.to_path_buf()) }).to_json_string())
}

pub fn video_result(
    path: &Path,
    detector: &dyn Detector,
    classifier: Option<&dyn Classifier>,
    config: &PipelineConfig,
    target_fps: f64,
    progress: ProgressSink<'_>,
) -> Result<VideoResult, VideoError> {
    let source = open_video(path)?;
    classify_video(source.as_ref(), detector, classifier, config, target_fps, progress)
}

/// Frames a video will be sampled into, for progress totals.
pub fn video_frame_count(path: &Path, target_fps: f64) -> Result<usize, VideoError> {
    let meta = open_video(path)?.meta();
    let fps = trapkit::video::effective_fps(meta.native_fps, target_fps);
    Ok(trapkit::video::sample_times(meta.duration_s, fps).len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub file: PathBuf,
    pub max_detection_conf: f64,
    /// Lowest top-class score among classified detections.
    pub min_classification_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageSummary {
    pub threshold: f64,
    pub total: usize,
    pub confident: usize,
    pub review: usize,
    pub failed: usize,
    pub review_list: Vec<ReviewItem>,
}

/// Partitions a results document at `threshold`. Failed images are counted
/// but not routed.
pub fn triage_document(doc: &MdDocument, threshold: f64) -> Result<TriageSummary, trapkit::export::ExportError> {
    let outcomes = doc.to_outcomes(None)?;
    let failed = outcomes.iter().filter(|o| o.result().is_none()).count();
    let results: Vec<_> = outcomes.into_iter().filter_map(|o| o.result().cloned()).collect();
    let t = triage(&results, threshold);
    Ok(TriageSummary {
        threshold,
        total: results.len() + failed,
        confident: t.confident.len(),
        review: t.review.len(),
        failed,
        review_list: t
            .review
            .iter()
            .map(|r| ReviewItem {
                file: r.image.path.clone(),
                max_detection_conf: r.max_detection_conf(),
                min_classification_score: r.min_classification_score(),
            })
            .collect(),
    })
}
