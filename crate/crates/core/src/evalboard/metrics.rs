//! Detection and triage metrics.
//!
//! Matching is greedy: predictions in descending confidence order (input
//! order on ties) each claim the unmatched ground truth of the same
//! category with the highest IoU at or above the threshold (lowest index on
//! ties). AP is the all-point interpolated area under the precision-recall
//! curve, summed in rank order over true positives.

use std::iter::Sum;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::types::{iou, BBox, DetectionCategory};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub category: DetectionCategory,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub category: DetectionCategory,
    pub bbox: BBox,
}

/// Boxes of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageBoxes {
    #[serde(default)]
    pub predictions: Vec<Prediction>,
    #[serde(default)]
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Add for MatchCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl Sum for MatchCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Assignment for one image. Indices refer to the caller's slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matches {
    /// Per prediction, the ground truth it matched.
    pub pred_to_gt: Vec<Option<usize>>,
    /// Per ground truth, the prediction that claimed it.
    pub gt_to_pred: Vec<Option<usize>>,
}

impl Matches {
    pub fn counts(&self) -> MatchCounts {
        let tp = self.pred_to_gt.iter().filter(|m| m.is_some()).count();
        MatchCounts { tp, fp: self.pred_to_gt.len() - tp, fn_: self.gt_to_pred.len() - tp }
    }

    pub fn true_positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pred_to_gt.iter().enumerate().filter_map(|(p, g)| g.map(|g| (p, g)))
    }
}

/// Prediction indices by descending confidence, stable.
fn rank(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

pub fn match_detections(preds: &[Prediction], gts: &[GroundTruth], iou_threshold: f64) -> Matches {
    let mut pred_to_gt = vec![None; preds.len()];
    let mut gt_to_pred = vec![None; gts.len()];
    for p in rank(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_to_pred[g].is_some() || gt.category != preds[p].category {
                continue;
            }
            let o = iou(&preds[p].bbox, &gt.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            pred_to_gt[p] = Some(g);
            gt_to_pred[g] = Some(p);
        }
    }
    Matches { pred_to_gt, gt_to_pred }
}

/// `(TP/(TP+FP), TP/(TP+FN))`; precision is 1 with no predictions and recall
/// is 1 with no ground truth.
pub fn precision_recall(counts: MatchCounts) -> (f64, f64) {
    let precision = if counts.tp + counts.fp == 0 { 1.0 } else { counts.tp as f64 / (counts.tp + counts.fp) as f64 };
    let recall = if counts.tp + counts.fn_ == 0 { 1.0 } else { counts.tp as f64 / (counts.tp + counts.fn_) as f64 };
    (precision, recall)
}

/// AP from ranked hit flags (true = TP). Precision at each TP is replaced by
/// the maximum precision at any later rank, then averaged over `n_gt`.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_hits.iter().enumerate() {
        tp += hit as usize;
        precisions.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut area = 0.0;
    for (i, &hit) in ranked_hits.iter().enumerate() {
        if hit {
            area += precisions[i];
        }
    }
    area / n_gt as f64
}

/// Aggregate result over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub map_score: f64,
    /// AP per category with at least one ground truth, in category order.
    pub per_category_ap: Vec<(DetectionCategory, f64)>,
}

/// Per-category AP over images. Predictions from all images are ranked
/// together by confidence (image order, then input order, on ties). The
/// mean covers categories with ground truth; with no ground truth at all it
/// is 1 when there are no predictions and 0 otherwise.
pub fn evaluate_images(images: &[ImageBoxes], iou_threshold: f64) -> DetectionMetrics {
    let matches: Vec<Matches> =
        images.iter().map(|im| match_detections(&im.predictions, &im.ground_truth, iou_threshold)).collect();
    let counts: MatchCounts = matches.iter().map(Matches::counts).sum();
    let (precision, recall) = precision_recall(counts);

    let mut per_category_ap = Vec::new();
    for cat in DetectionCategory::ALL {
        let n_gt: usize = images.iter().map(|im| im.ground_truth.iter().filter(|g| g.category == cat).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for (im, m) in images.iter().zip(&matches) {
            for (p, pred) in im.predictions.iter().enumerate() {
                if pred.category == cat {
                    scored.push((pred.confidence, m.pred_to_gt[p].is_some()));
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let hits: Vec<bool> = scored.iter().map(|s| s.1).collect();
        per_category_ap.push((cat, average_precision(&hits, n_gt)));
    }
    let map_score = if per_category_ap.is_empty() {
        if counts.fp == 0 { 1.0 } else { 0.0 }
    } else {
        per_category_ap.iter().map(|(_, ap)| ap).sum::<f64>() / per_category_ap.len() as f64
    };
    DetectionMetrics { counts, precision, recall, map_score, per_category_ap }
}

/// mAP for a single image's boxes.
pub fn mean_average_precision(preds: &[Prediction], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    evaluate_images(&[ImageBoxes { predictions: preds.to_vec(), ground_truth: gts.to_vec() }], iou_threshold).map_score
}

/// One classified item for triage: predicted label, its score, true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageItem {
    pub predicted: String,
    pub score: f64,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageMetrics {
    pub threshold: f64,
    pub total: usize,
    pub covered: usize,
    pub coverage: f64,
    /// `None` when nothing reaches the threshold.
    pub accuracy_above: Option<f64>,
}

pub fn triage_metrics(items: &[TriageItem], threshold: f64) -> TriageMetrics {
    let above: Vec<&TriageItem> = items.iter().filter(|i| i.score >= threshold).collect();
    let correct = above.iter().filter(|i| i.predicted == i.truth).count();
    TriageMetrics {
        threshold,
        total: items.len(),
        covered: above.len(),
        coverage: if items.is_empty() { 0.0 } else { above.len() as f64 / items.len() as f64 },
        accuracy_above: (!above.is_empty()).then(|| correct as f64 / above.len() as f64),
    }
}
