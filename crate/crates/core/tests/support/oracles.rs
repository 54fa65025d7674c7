//! Test-side reference implementations. Nothing here calls the library's
//! metric code; only its plain data types are shared.
#![allow(dead_code)]

use trapkit::evalboard::{GroundTruth, ImageBoxes, Prediction};
use trapkit::DetectionCategory;

pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1) = (a[0] + a[2], a[1] + a[3]);
    let (bx1, by1) = (b[0] + b[2], b[1] + b[3]);
    let iw = (ax1.min(bx1) - a[0].max(b[0])).max(0.0);
    let ih = (ay1.min(by1) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// Key of one prediction's assignment; larger is preferred.
#[derive(PartialEq, PartialOrd, Clone, Copy)]
struct Choice(u8, f64, i64);

/// Enumerates every injective same-category assignment above the threshold
/// and keeps the lexicographically best one, predictions taken in
/// descending confidence (index on ties), each preferring a higher IoU and
/// then a lower ground-truth index.
pub fn ref_match(preds: &[Prediction], gts: &[GroundTruth], thr: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut best: Option<(Vec<Choice>, Vec<Option<usize>>)> = None;
    let mut used = vec![false; gts.len()];
    let mut keys = Vec::new();
    let mut assign = vec![None; preds.len()];
    fn rec(
        k: usize,
        order: &[usize],
        preds: &[Prediction],
        gts: &[GroundTruth],
        thr: f64,
        used: &mut Vec<bool>,
        keys: &mut Vec<Choice>,
        assign: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<Choice>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let better = match best {
                None => true,
                Some((bk, _)) => keys.as_slice().partial_cmp(bk.as_slice()) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((keys.clone(), assign.clone()));
            }
            return;
        }
        let p = order[k];
        keys.push(Choice(0, 0.0, 0));
        assign[p] = None;
        rec(k + 1, order, preds, gts, thr, used, keys, assign, best);
        keys.pop();
        for g in 0..gts.len() {
            if used[g] || gts[g].category != preds[p].category {
                continue;
            }
            let o = ref_iou(preds[p].bbox.to_array(), gts[g].bbox.to_array());
            if o < thr {
                continue;
            }
            used[g] = true;
            keys.push(Choice(1, o, -(g as i64)));
            assign[p] = Some(g);
            rec(k + 1, order, preds, gts, thr, used, keys, assign, best);
            assign[p] = None;
            keys.pop();
            used[g] = false;
        }
    }
    rec(0, &order, preds, gts, thr, &mut used, &mut keys, &mut assign, &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
}

/// Brute-force precision, recall and all-point-interpolated mAP.
pub fn ref_metrics(images: &[ImageBoxes], thr: f64) -> RefMetrics {
    let assigns: Vec<Vec<Option<usize>>> = images.iter().map(|im| ref_match(&im.predictions, &im.ground_truth, thr)).collect();
    let tp: usize = assigns.iter().map(|a| a.iter().filter(|x| x.is_some()).count()).sum();
    let n_pred: usize = images.iter().map(|im| im.predictions.len()).sum();
    let n_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    let (fp, fn_) = (n_pred - tp, n_gt - tp);
    let precision = if n_pred == 0 { 1.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };

    let mut aps = Vec::new();
    for cat in [DetectionCategory::Animal, DetectionCategory::Person, DetectionCategory::Vehicle] {
        let cat_gt = images.iter().flat_map(|im| &im.ground_truth).filter(|g| g.category == cat).count();
        if cat_gt == 0 {
            continue;
        }
        // (confidence, image, index, hit)
        let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (i, (im, a)) in images.iter().zip(&assigns).enumerate() {
            for (j, p) in im.predictions.iter().enumerate() {
                if p.category == cat {
                    ranked.push((p.confidence, i, j, a[j].is_some()));
                }
            }
        }
        ranked.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let prec_at = |r: usize| ranked[..=r].iter().filter(|x| x.3).count() as f64 / (r + 1) as f64;
        let mut area = 0.0;
        for i in 0..ranked.len() {
            if ranked[i].3 {
                area += (i..ranked.len()).map(prec_at).fold(f64::MIN, f64::max);
            }
        }
        aps.push(area / cat_gt as f64);
    }
    let map = if aps.is_empty() {
        if fp == 0 { 1.0 } else { 0.0 }
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    RefMetrics { tp, fp, fn_, precision, recall, map }
}

/// P(majority of n independent frames correct) with per-frame error p;
/// n odd.
pub fn majority_success(n: u64, p: f64) -> f64 {
    let mut total = 0.0;
    for k in (n / 2 + 1)..=n {
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        total += c * (1.0 - p).powi(k as i32) * p.powi((n - k) as i32);
    }
    total
}

/// Box `k` (0..25) of the 5×5 grid: side 1/2, top-left corner at
/// `(k % 5, k / 5) / 8`. All coordinates are dyadic, so IoUs are exact.
pub fn grid_box(k: usize) -> trapkit::BBox {
    trapkit::BBox::new((k % 5) as f64 / 8.0, (k / 5) as f64 / 8.0, 0.5, 0.5).unwrap()
}

/// Confidences by input position: unsorted, with a tie.
pub const SWEEP_CONF: [f64; 4] = [0.6, 0.9, 0.6, 0.8];

/// Calls `f` for every instance with up to `max_preds` predictions (ordered,
/// repetition allowed) and up to `max_gts` ground truths (multisets) drawn
/// from `palette`. Returns the number of instances.
pub fn exhaustive_sweep(
    palette: &[(DetectionCategory, trapkit::BBox)],
    max_preds: usize,
    max_gts: usize,
    mut f: impl FnMut(&[Prediction], &[GroundTruth]),
) -> u64 {
    fn sequences(n: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for i in 0..n {
                    let mut t: Vec<usize> = s.clone();
                    t.push(i);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
    let pred_sets: Vec<Vec<Prediction>> = sequences(palette.len(), max_preds)
        .into_iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .map(|(pos, &i)| Prediction { category: palette[i].0, bbox: palette[i].1, confidence: SWEEP_CONF[pos % 4] })
                .collect()
        })
        .collect();
    let gt_sets: Vec<Vec<GroundTruth>> = sequences(palette.len(), max_gts)
        .into_iter()
        .filter(|s| s.windows(2).all(|w| w[0] <= w[1]))
        .map(|s| s.iter().map(|&i| GroundTruth { category: palette[i].0, bbox: palette[i].1 }).collect())
        .collect();
    let mut n = 0;
    for p in &pred_sets {
        for g in &gt_sets {
            f(p, g);
            n += 1;
        }
    }
    n
}
