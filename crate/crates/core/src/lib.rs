//! Camera-trap detection and classification toolkit.
//!
//! Images flow through a detector, animal crops through an optional
//! classifier ([`pipeline`]); videos are sampled and majority-voted
//! ([`video`]). Results export to MegaDetector-batch JSON and COCO
//! ([`export`]), datasets are split without location leakage
//! ([`datakit`]), classifiers are fine-tuned on crops ([`finetune`]) and
//! models are scored against hidden test sets ([`evalboard`]).

pub mod backends;
pub mod datakit;
pub mod evalboard;
pub mod export;
pub mod finetune;
pub mod pipeline;
pub mod synth;
pub mod types;
pub mod video;

pub use types::{iou, to_absolute, BBox, ClassScores, Detection, DetectionCategory, GeoPoint, ImageRef, PixelBox};
