//! Detector and classifier backends.
//!
//! Every model in the zoo is described by a [`ModelManifest`]; [`load_backend`]
//! verifies the artifact checksum and returns a [`Backend`] handle exposing
//! either [`Detector::detect`] or [`Classifier::classify`]. The synthetic
//! oracle backends in [`oracle`] read per-image sidecar annotations so every
//! pipeline and metric test runs offline with a known answer.

mod manifest;
pub mod oracle;
pub mod zoo;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use thiserror::Error;

use crate::types::{ClassScores, Detection, ImageRef};

pub use manifest::{sha256_file, sha256_hex, ArtifactFormat, ModelManifest, ModelTask};
pub use oracle::{
    install_oracle_models, read_sidecar, sidecar_path, write_sidecar, OracleClassifier, OracleClassifierConfig, OracleDetector,
    OracleDetectorConfig, SidecarObject,
};
pub use zoo::ModelZoo;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("checksum mismatch for {path}: expected {expected}, found {actual}")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("unsupported task: {0}")]
    UnsupportedTask(String),
    #[error("artifact format {0:?} has no backend in this build")]
    UnsupportedFormat(ArtifactFormat),
    #[error("artifact not found: {0}")]
    ArtifactNotFound(PathBuf),
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("crop is {actual_w}x{actual_h} but the backend expects {expected}x{expected}")]
    ShapeMismatch { expected: u32, actual_w: u32, actual_h: u32 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),
    #[error("bad sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("model {0} already exists in the zoo")]
    DuplicateModel(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BackendError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Static description of a loaded backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendInfo {
    pub manifest: ModelManifest,
    pub supports_concurrent_inference: bool,
    pub parameter_count: Option<u64>,
}

/// A decoded image together with its reference.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub reference: ImageRef,
    pub pixels: RgbImage,
}

impl LoadedImage {
    /// Decodes the referenced file. The returned reference carries the
    /// decoded dimensions.
    pub fn open(reference: &ImageRef) -> Result<Self, BackendError> {
        let decoded = image::open(&reference.path).map_err(|e| BackendError::ImageDecode {
            path: reference.path.clone(),
            message: e.to_string(),
        })?;
        let pixels = decoded.to_rgb8();
        let mut reference = reference.clone();
        reference.width_px = Some(pixels.width());
        reference.height_px = Some(pixels.height());
        Ok(Self { reference, pixels })
    }

    pub fn from_pixels(reference: ImageRef, pixels: RgbImage) -> Self {
        let mut reference = reference;
        reference.width_px = Some(pixels.width());
        reference.height_px = Some(pixels.height());
        Self { reference, pixels }
    }
}

pub trait Detector: Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Detections with confidence >= `conf_threshold`, highest confidence first.
    fn detect(&self, image: &LoadedImage, conf_threshold: f64) -> Result<Vec<Detection>, BackendError>;
}

pub trait Classifier: Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Scores over `info().manifest.class_labels`, in that order. The crop
    /// must be `input_size_px` square.
    fn classify(&self, crop: &RgbImage) -> Result<ClassScores, BackendError>;

    fn class_labels(&self) -> &[String] {
        &self.info().manifest.class_labels
    }

    fn input_size_px(&self) -> u32 {
        self.info().manifest.input_size_px
    }
}

/// Checks a crop against the backend's square input size.
pub fn check_crop_shape(crop: &RgbImage, expected: u32) -> Result<(), BackendError> {
    if crop.width() != expected || crop.height() != expected {
        return Err(BackendError::ShapeMismatch {
            expected,
            actual_w: crop.width(),
            actual_h: crop.height(),
        });
    }
    Ok(())
}

pub(crate) fn check_threshold(t: f64) -> Result<(), BackendError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(BackendError::InvalidThreshold(t));
    }
    Ok(())
}

#[derive(Clone)]
pub enum Backend {
    Detector(Arc<dyn Detector>),
    Classifier(Arc<dyn Classifier>),
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("task", &self.task())
            .field("model", &self.info().manifest.key())
            .finish()
    }
}

impl Backend {
    pub fn task(&self) -> ModelTask {
        match self {
            Backend::Detector(_) => ModelTask::Detector,
            Backend::Classifier(_) => ModelTask::Classifier,
        }
    }

    pub fn info(&self) -> &BackendInfo {
        match self {
            Backend::Detector(d) => d.info(),
            Backend::Classifier(c) => c.info(),
        }
    }

    pub fn detector(&self) -> Option<Arc<dyn Detector>> {
        match self {
            Backend::Detector(d) => Some(Arc::clone(d)),
            Backend::Classifier(_) => None,
        }
    }

    pub fn classifier(&self) -> Option<Arc<dyn Classifier>> {
        match self {
            Backend::Classifier(c) => Some(Arc::clone(c)),
            Backend::Detector(_) => None,
        }
    }
}

/// Loads the backend described by `manifest` after verifying its artifact.
pub fn load_backend(manifest: &ModelManifest) -> Result<Backend, BackendError> {
    manifest.validate()?;
    let bytes = manifest.read_verified_artifact()?;
    match (manifest.format, manifest.task) {
        (ArtifactFormat::OracleDetector, ModelTask::Detector) => {
            Ok(Backend::Detector(Arc::new(OracleDetector::from_artifact(manifest.clone(), &bytes)?)))
        }
        (ArtifactFormat::OracleClassifier, ModelTask::Classifier) => Ok(Backend::Classifier(Arc::new(
            OracleClassifier::from_artifact(manifest.clone(), &bytes)?,
        ))),
        (ArtifactFormat::TinyCnn, ModelTask::Classifier) => Ok(Backend::Classifier(Arc::new(
            crate::finetune::TinyCnnClassifier::from_artifact(manifest.clone(), &bytes)?,
        ))),
        (ArtifactFormat::Onnx, _) => Err(BackendError::UnsupportedFormat(ArtifactFormat::Onnx)),
        (format, task) => Err(BackendError::UnsupportedTask(format!("{format:?} artifacts cannot serve as {task:?}"))),
    }
}
