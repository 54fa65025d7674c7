//! Synthetic oracle backends.
//!
//! The oracle detector reads the ground truth for `scene.png` from the
//! sidecar `scene.json` (a list of `{bbox, category, label}` objects) and
//! optionally perturbs it with seeded box jitter, dropped objects and
//! spurious boxes. The oracle classifier scores a crop by its dominant
//! colour channel: class 0 is red, class 1 green, class 2 blue.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_crop_shape, check_threshold, sha256_hex, ArtifactFormat, BackendError, BackendInfo, Classifier,
    Detector, LoadedImage, ModelManifest, ModelTask,
};
use crate::types::{BBox, ClassScores, Detection, DetectionCategory};

/// One ground-truth object in a sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarObject {
    pub bbox: BBox,
    pub category: DetectionCategory,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Location of the ground-truth sidecar for an image.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

/// Reads the sidecar of `image`; a missing sidecar is an empty scene.
pub fn read_sidecar(image: &Path) -> Result<Vec<SidecarObject>, BackendError> {
    let path = sidecar_path(image);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(BackendError::io(&path, e)),
    };
    let objects: Vec<SidecarObject> =
        serde_json::from_str(&text).map_err(|e| BackendError::Sidecar { path: path.clone(), message: e.to_string() })?;
    for o in &objects {
        if let Some(c) = o.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(BackendError::Sidecar { path, message: format!("confidence {c} outside [0, 1]") });
            }
        }
    }
    Ok(objects)
}

pub fn write_sidecar(image: &Path, objects: &[SidecarObject]) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(objects).expect("sidecar serializes");
    fs::write(sidecar_path(image), text)
}

/// Perturbation applied by the oracle detector. All zeros reproduces the
/// sidecar exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleDetectorConfig {
    pub seed: u64,
    /// Standard deviation of each box edge, as a fraction of the box size.
    pub jitter_sigma: f64,
    /// Probability that a ground-truth object is not reported.
    pub drop_rate: f64,
    /// Per-object (at least one per image) probability of an extra false box.
    pub spurious_rate: f64,
    /// Reported confidence is the object's confidence minus U(0, score_noise).
    pub score_noise: f64,
}

impl Default for OracleDetectorConfig {
    fn default() -> Self {
        Self { seed: 0, jitter_sigma: 0.0, drop_rate: 0.0, spurious_rate: 0.0, score_noise: 0.0 }
    }
}

impl OracleDetectorConfig {
    fn validate(&self) -> Result<(), BackendError> {
        let rates = [self.drop_rate, self.spurious_rate, self.score_noise];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || !(self.jitter_sigma >= 0.0) {
            return Err(BackendError::InvalidArtifact(format!("oracle perturbation out of range: {self:?}")));
        }
        Ok(())
    }
}

pub struct OracleDetector {
    info: BackendInfo,
    config: OracleDetectorConfig,
}

impl OracleDetector {
    pub fn new(manifest: ModelManifest, config: OracleDetectorConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            info: BackendInfo { parameter_count: manifest.parameter_count, manifest, supports_concurrent_inference: true },
            config,
        })
    }

    pub fn from_artifact(manifest: ModelManifest, bytes: &[u8]) -> Result<Self, BackendError> {
        let config = serde_json::from_slice(bytes).map_err(|e| BackendError::InvalidArtifact(e.to_string()))?;
        Self::new(manifest, config)
    }

    pub fn config(&self) -> &OracleDetectorConfig {
        &self.config
    }

    fn rng_for(&self, image: &Path) -> ChaCha8Rng {
        let name = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Every detection the oracle would report, before thresholding.
    pub fn raw_detections(&self, image_path: &Path) -> Result<Vec<Detection>, BackendError> {
        let truth = read_sidecar(image_path)?;
        let cfg = &self.config;
        let mut rng = self.rng_for(image_path);
        let normal = Normal::new(0.0, cfg.jitter_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

        let mut out = Vec::with_capacity(truth.len());
        for obj in &truth {
            let dropped = rng.random::<f64>() < cfg.drop_rate;
            let bbox = if cfg.jitter_sigma > 0.0 {
                let b = obj.bbox;
                let (w, h) = (b.width(), b.height());
                let x0 = b.x_min() + normal.sample(&mut rng) * w;
                let y0 = b.y_min() + normal.sample(&mut rng) * h;
                let x1 = b.x_max() + normal.sample(&mut rng) * w;
                let y1 = b.y_max() + normal.sample(&mut rng) * h;
                BBox::clipped(x0, y0, x1 - x0, y1 - y0).unwrap_or(b)
            } else {
                obj.bbox
            };
            let noise = if cfg.score_noise > 0.0 { rng.random::<f64>() * cfg.score_noise } else { 0.0 };
            if dropped {
                continue;
            }
            let conf = (obj.confidence.unwrap_or(1.0) - noise).clamp(0.0, 1.0);
            out.push(Detection::new(bbox, obj.category, conf).expect("confidence clamped"));
        }

        if cfg.spurious_rate > 0.0 {
            for _ in 0..truth.len().max(1) {
                if rng.random::<f64>() >= cfg.spurious_rate {
                    continue;
                }
                let category = DetectionCategory::ALL[rng.random_range(0..3)];
                let w = rng.random_range(0.05..0.3);
                let h = rng.random_range(0.05..0.3);
                let x = rng.random_range(0.0..1.0 - w);
                let y = rng.random_range(0.0..1.0 - h);
                let conf = rng.random::<f64>();
                let bbox = BBox::new(x, y, w, h).expect("spurious box inside the unit square");
                out.push(Detection::new(bbox, category, conf).expect("confidence in [0, 1)"));
            }
        }
        Ok(out)
    }
}

impl Detector for OracleDetector {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn detect(&self, image: &LoadedImage, conf_threshold: f64) -> Result<Vec<Detection>, BackendError> {
        check_threshold(conf_threshold)?;
        let mut dets: Vec<Detection> = self
            .raw_detections(&image.reference.path)?
            .into_iter()
            .filter(|d| d.confidence() >= conf_threshold)
            .collect();
        dets.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
        Ok(dets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleClassifierConfig {
    /// Below this gap between the two strongest channel means the crop is
    /// treated as ambiguous and scored uniformly.
    pub uncertain_margin: f64,
}

impl Default for OracleClassifierConfig {
    fn default() -> Self {
        Self { uncertain_margin: 0.1 }
    }
}

/// Pure colour standing for class `index` under the oracle classifier rule.
pub fn class_color(index: usize) -> Option<[u8; 3]> {
    match index {
        0 => Some([255, 0, 0]),
        1 => Some([0, 255, 0]),
        2 => Some([0, 0, 255]),
        _ => None,
    }
}

pub struct OracleClassifier {
    info: BackendInfo,
    config: OracleClassifierConfig,
}

impl OracleClassifier {
    pub fn new(manifest: ModelManifest, config: OracleClassifierConfig) -> Result<Self, BackendError> {
        if manifest.class_labels.is_empty() {
            return Err(BackendError::InvalidManifest("oracle classifier needs class labels".into()));
        }
        Ok(Self {
            info: BackendInfo { parameter_count: manifest.parameter_count, manifest, supports_concurrent_inference: true },
            config,
        })
    }

    pub fn from_artifact(manifest: ModelManifest, bytes: &[u8]) -> Result<Self, BackendError> {
        let config = serde_json::from_slice(bytes).map_err(|e| BackendError::InvalidArtifact(e.to_string()))?;
        Self::new(manifest, config)
    }

    fn channel_means(crop: &RgbImage) -> [f64; 3] {
        let mut sum = [0u64; 3];
        for p in crop.pixels() {
            for c in 0..3 {
                sum[c] += p.0[c] as u64;
            }
        }
        let n = (crop.width() as u64 * crop.height() as u64).max(1) as f64 * 255.0;
        [sum[0] as f64 / n, sum[1] as f64 / n, sum[2] as f64 / n]
    }
}

impl Classifier for OracleClassifier {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn classify(&self, crop: &RgbImage) -> Result<ClassScores, BackendError> {
        check_crop_shape(crop, self.info.manifest.input_size_px)?;
        let labels = &self.info.manifest.class_labels;
        let k = labels.len();
        let to_err = |e| BackendError::InvalidArtifact(format!("oracle produced invalid scores: {e}"));
        if k == 1 {
            return ClassScores::new([(labels[0].clone(), 1.0)]).map_err(to_err);
        }

        let means = Self::channel_means(crop);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
        let dominant = order[0];
        let margin = means[order[0]] - means[order[1]];
        if margin <= self.config.uncertain_margin || dominant >= k {
            return ClassScores::uniform(labels).map_err(to_err);
        }

        let top = margin.max(1.0 / k as f64).min(1.0);
        let rest = (1.0 - top) / (k - 1) as f64;
        ClassScores::new(labels.iter().enumerate().map(|(i, l)| (l.clone(), if i == dominant { top } else { rest })))
            .map_err(to_err)
    }
}

/// Writes the oracle detector/classifier pair (artifacts and manifests) into
/// `dir` and returns their manifests.
pub fn install_oracle_models<S: AsRef<str>>(
    dir: &Path,
    detector: &OracleDetectorConfig,
    class_labels: &[S],
) -> Result<(ModelManifest, ModelManifest), BackendError> {
    fs::create_dir_all(dir).map_err(|e| BackendError::io(dir, e))?;

    let det_bytes = serde_json::to_vec_pretty(detector).expect("config serializes");
    let det_artifact = dir.join("oracle-detector.artifact.json");
    fs::write(&det_artifact, &det_bytes).map_err(|e| BackendError::io(&det_artifact, e))?;
    let mut det = ModelManifest::new(
        "oracle-detector",
        "1",
        ModelTask::Detector,
        ArtifactFormat::OracleDetector,
        Vec::new(),
        "oracle-detector.artifact.json",
        sha256_hex(&det_bytes),
        640,
    );
    det.description = "Synthetic detector replaying sidecar ground truth".into();
    det.write(dir.join("oracle-detector.manifest.json"))?;

    let clf_bytes = serde_json::to_vec_pretty(&OracleClassifierConfig::default()).expect("config serializes");
    let clf_artifact = dir.join("oracle-classifier.artifact.json");
    fs::write(&clf_artifact, &clf_bytes).map_err(|e| BackendError::io(&clf_artifact, e))?;
    let mut clf = ModelManifest::new(
        "oracle-classifier",
        "1",
        ModelTask::Classifier,
        ArtifactFormat::OracleClassifier,
        class_labels.iter().map(|s| s.as_ref().to_string()).collect(),
        "oracle-classifier.artifact.json",
        sha256_hex(&clf_bytes),
        256,
    );
    clf.description = "Synthetic classifier keyed on the dominant colour channel".into();
    clf.write(dir.join("oracle-classifier.manifest.json"))?;

    Ok((det.with_base_dir(dir), clf.with_base_dir(dir)))
}
