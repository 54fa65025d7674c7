//! Classifier fine-tuning on crop datasets: SGD with momentum and a step
//! learning-rate schedule, evaluation, and export into a model zoo.

pub mod tiny_cnn;

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    check_crop_shape, sha256_hex, ArtifactFormat, BackendError, BackendInfo, Classifier, ModelManifest, ModelTask,
    ModelZoo,
};
use crate::datakit::CropRecord;
use crate::types::ClassScores;
pub use tiny_cnn::TinyCnn;

pub const TINY_BACKBONE: &str = "tiny-cnn";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.json";

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("training needs at least 2 distinct labels, found {0}")]
    TooFewClasses(usize),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("label {0:?} is not known to the model")]
    UnknownLabel(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("backbone {0:?} is not available in this build (available: tiny-cnn)")]
    UnsupportedBackbone(String),
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FinetuneError + '_ {
    move |source| FinetuneError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub initial_lr: f64,
    pub momentum: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub backbone_id: String,
    pub seed: u64,
    /// Crop side the exported classifier expects; matches the pipeline crop size.
    pub input_size_px: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            optimizer: Optimizer::Sgd,
            initial_lr: 0.01,
            momentum: 0.9,
            lr_step_epochs: 20,
            lr_gamma: 0.1,
            backbone_id: TINY_BACKBONE.into(),
            seed: 0,
            input_size_px: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: &str| Err(FinetuneError::InvalidConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma must be in (0, 1]");
        }
        if self.lr_step_epochs < 1 {
            return bad("lr_step_epochs must be at least 1");
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.input_size_px < 8 {
            return bad("input_size_px must be at least 8");
        }
        if self.backbone_id != TINY_BACKBONE {
            return Err(FinetuneError::UnsupportedBackbone(self.backbone_id.clone()));
        }
        Ok(())
    }

    /// `initial_lr * lr_gamma ^ floor(epoch / lr_step_epochs)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

/// Classifier backend over a [`TinyCnn`].
#[derive(Debug, Clone)]
pub struct TinyCnnClassifier {
    info: BackendInfo,
    net: TinyCnn,
}

impl TinyCnnClassifier {
    pub fn from_artifact(manifest: ModelManifest, bytes: &[u8]) -> Result<Self, BackendError> {
        let net: TinyCnn = serde_json::from_slice(bytes).map_err(|e| BackendError::InvalidArtifact(e.to_string()))?;
        net.check_shapes().map_err(BackendError::InvalidArtifact)?;
        if net.labels != manifest.class_labels {
            return Err(BackendError::InvalidManifest("class_labels differ from the artifact's labels".into()));
        }
        Ok(Self::from_net(net, manifest))
    }

    fn from_net(net: TinyCnn, manifest: ModelManifest) -> Self {
        let info = BackendInfo {
            parameter_count: Some(net.parameter_count()),
            manifest,
            supports_concurrent_inference: true,
        };
        Self { info, net }
    }

    pub fn network(&self) -> &TinyCnn {
        &self.net
    }

    pub fn artifact_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.net).expect("network serializes")
    }
}

impl Classifier for TinyCnnClassifier {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn classify(&self, crop: &RgbImage) -> Result<ClassScores, BackendError> {
        check_crop_shape(crop, self.info.manifest.input_size_px)?;
        let probs = self.net.predict(&tiny_cnn::preprocess(crop));
        ClassScores::new(self.net.labels.iter().cloned().zip(probs))
            .map_err(|e| BackendError::InvalidArtifact(format!("network produced invalid scores: {e}")))
    }
}

fn load_crop(path: &Path) -> Result<RgbImage, FinetuneError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| FinetuneError::ImageDecode { path: path.to_path_buf(), message: e.to_string() })
}

/// Loads crop images from disk.
pub fn load_crops(records: &[CropRecord]) -> Result<Vec<(RgbImage, String)>, FinetuneError> {
    records.iter().map(|r| Ok((load_crop(&r.crop_path)?, r.label.clone()))).collect()
}

/// Trains on crop records. The best-epoch checkpoint and the JSON-lines log
/// are written to `run_dir`.
pub fn train(
    train_crops: &[CropRecord],
    val_crops: &[CropRecord],
    config: &TrainConfig,
    run_dir: &Path,
) -> Result<(TinyCnnClassifier, TrainHistory), FinetuneError> {
    config.validate()?;
    train_images(&load_crops(train_crops)?, &load_crops(val_crops)?, config, Some(run_dir))
}

/// [`train`] over in-memory crops.
pub fn train_images(
    train_set: &[(RgbImage, String)],
    val_set: &[(RgbImage, String)],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(TinyCnnClassifier, TrainHistory), FinetuneError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(FinetuneError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(FinetuneError::EmptyDataset("validation"));
    }
    let labels: Vec<String> = train_set.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if labels.len() < 2 {
        return Err(FinetuneError::TooFewClasses(labels.len()));
    }
    let index = |l: &str| labels.iter().position(|x| x == l).ok_or_else(|| FinetuneError::UnknownLabel(l.to_string()));
    let encode = |set: &[(RgbImage, String)]| -> Result<Vec<(tiny_cnn::Input, usize)>, FinetuneError> {
        set.iter().map(|(img, l)| Ok((tiny_cnn::preprocess(img), index(l)?))).collect()
    };
    let train_xs = encode(train_set)?;
    let val_xs = encode(val_set)?;

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log = dir.join(TRAIN_LOG);
        fs::write(&log, b"").map_err(io_err(&log))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = TinyCnn::init(labels.clone(), &mut rng);
    let mut velocity = tiny_cnn::Grads::zeros_like(&net);
    let mut order: Vec<usize> = (0..train_xs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, TinyCnn)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = tiny_cnn::Grads::zeros_like(&net);
            for &i in batch {
                let (x, y) = &train_xs[i];
                total_loss += net.loss_and_grad(x, *y, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            let mu = config.momentum;
            let vs = [&mut velocity.conv_w, &mut velocity.conv_b, &mut velocity.dense_w, &mut velocity.dense_b];
            for ((p, v), g) in net.params_mut().into_iter().zip(vs).zip(grads.parts()) {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        let correct = val_xs.iter().filter(|(x, y)| argmax(&net.predict(x)) == *y).count();
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total_loss / train_xs.len() as f64,
            val_accuracy: correct as f64 / val_xs.len() as f64,
        };
        if best.as_ref().is_none_or(|(_, acc, _)| record.val_accuracy > *acc) {
            if let Some(dir) = run_dir {
                write_atomic(&dir.join(BEST_CHECKPOINT), &serde_json::to_vec(&net).expect("network serializes"))?;
            }
            best = Some((epoch, record.val_accuracy, net.clone()));
        }
        if let Some(dir) = run_dir {
            let log = dir.join(TRAIN_LOG);
            let mut f = OpenOptions::new().append(true).open(&log).map_err(io_err(&log))?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io_err(&log))?;
        }
        log::info!("epoch {epoch}: lr {lr} loss {:.4} val_acc {:.4}", record.train_loss, record.val_accuracy);
        history.push(record);
    }

    let (best_epoch, _, best_net) = best.expect("at least one epoch");
    let bytes = serde_json::to_vec(&best_net).expect("network serializes");
    let mut manifest = ModelManifest::new(
        "tiny-cnn-finetuned",
        "0",
        ModelTask::Classifier,
        ArtifactFormat::TinyCnn,
        labels,
        BEST_CHECKPOINT,
        sha256_hex(&bytes),
        config.input_size_px,
    );
    manifest.parameter_count = Some(best_net.parameter_count());
    if let Some(dir) = run_dir {
        manifest = manifest.with_base_dir(dir);
    }
    Ok((TinyCnnClassifier::from_net(best_net, manifest), TrainHistory { epochs: history, best_epoch }))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FinetuneError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub total: usize,
    pub accuracy: f64,
    /// `None` for labels absent from the evaluation set.
    pub per_class_accuracy: IndexMap<String, Option<f64>>,
    /// Rows are true labels, columns predictions, both in backend label order.
    pub confusion: Vec<Vec<u64>>,
    pub labels: Vec<String>,
}

pub fn evaluate_classifier(backend: &dyn Classifier, crops: &[CropRecord]) -> Result<ClassifierEval, FinetuneError> {
    evaluate_images(backend, &load_crops(crops)?)
}

/// Crops whose size differs from the backend input are resized to it.
pub fn evaluate_images(backend: &dyn Classifier, crops: &[(RgbImage, String)]) -> Result<ClassifierEval, FinetuneError> {
    if crops.is_empty() {
        return Err(FinetuneError::EmptyDataset("evaluation"));
    }
    let labels: Vec<String> = backend.class_labels().to_vec();
    let size = backend.input_size_px();
    let mut confusion = vec![vec![0u64; labels.len()]; labels.len()];
    for (img, label) in crops {
        let truth = labels.iter().position(|l| l == label).ok_or_else(|| FinetuneError::UnknownLabel(label.clone()))?;
        let scores = if img.dimensions() == (size, size) {
            backend.classify(img)?
        } else {
            backend.classify(&imageops::resize(img, size, size, FilterType::Triangle))?
        };
        confusion[truth][scores.argmax_index()] += 1;
    }
    let correct: u64 = (0..labels.len()).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let row: u64 = confusion[i].iter().sum();
            (l.clone(), (row > 0).then(|| confusion[i][i] as f64 / row as f64))
        })
        .collect();
    Ok(ClassifierEval {
        total: crops.len(),
        accuracy: correct as f64 / crops.len() as f64,
        per_class_accuracy,
        confusion,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub model_id: String,
    pub version: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub region_tags: Vec<String>,
}

/// Writes the network into `zoo` and returns the stored manifest.
pub fn export_model(backend: &TinyCnnClassifier, zoo: &ModelZoo, meta: &ExportMetadata) -> Result<ModelManifest, FinetuneError> {
    let bytes = backend.artifact_bytes();
    let staging_name = format!(".{}-{}.staging.json", meta.model_id, meta.version);
    let staging = zoo.dir().join(&staging_name);
    fs::write(&staging, &bytes).map_err(io_err(&staging))?;
    let mut manifest = ModelManifest::new(
        meta.model_id.clone(),
        meta.version.clone(),
        ModelTask::Classifier,
        ArtifactFormat::TinyCnn,
        backend.net.labels.clone(),
        staging_name,
        sha256_hex(&bytes),
        backend.info.manifest.input_size_px,
    )
    .with_base_dir(zoo.dir());
    manifest.description = meta.description.clone();
    manifest.region_tags = meta.region_tags.clone();
    manifest.parameter_count = Some(backend.net.parameter_count());
    let stored = zoo.add(&manifest);
    let _ = fs::remove_file(&staging);
    Ok(stored?)
}
