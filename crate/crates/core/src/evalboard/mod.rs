//! Detection metrics, triage metrics and the model-zoo leaderboard.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub mod board;
pub mod metrics;

pub use board::{
    rank_records, EvalRecord, FeedbackEntry, FeedbackSubmission, HiddenTestSet, Leaderboard, RatingSummary,
    TestSetDescriptor, FEEDBACK_FILE, RECORDS_FILE, TEST_SET_DIR,
};
pub use metrics::{
    average_precision, evaluate_images, match_detections, mean_average_precision, precision_recall, triage_metrics,
    DetectionMetrics, GroundTruth, ImageBoxes, MatchCounts, Matches, Prediction, TriageItem, TriageMetrics,
    DEFAULT_IOU_THRESHOLD,
};

use crate::pipeline::PipelineResult;
use crate::video::frame_vote;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown test set {0:?}")]
    UnknownTestSet(String),
    #[error("malformed submission: {0}")]
    MalformedSubmission(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("rating {0} outside 1..=5")]
    InvalidRating(i64),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid test set: {0}")]
    InvalidTestSet(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Image-level triage items: the top class of the most confident animal
/// detection (or `empty`) against the true label. Images without a truth
/// label are skipped.
pub fn triage_items(results: &[PipelineResult], truths: &HashMap<PathBuf, String>) -> Vec<TriageItem> {
    results
        .iter()
        .filter_map(|r| {
            let truth = truths.get(&r.image.path)?;
            let (predicted, score) = frame_vote(r);
            Some(TriageItem { predicted, score, truth: truth.clone() })
        })
        .collect()
}
