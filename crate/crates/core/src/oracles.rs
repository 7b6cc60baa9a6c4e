//! Brute-force reference computations used to cross-check the optimized
//! code paths in tests.
//!
//! Everything here favors the most literal formulation over speed: set
//! membership is tested pixel by pixel, thresholds are swept one at a time,
//! and weighted means are recomputed from full parameter vectors.

use crate::metrics::Segment;

/// Mean IoU over classes present in either map, by per-class pixel scans.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    sum / present as f64
}

/// Non-interpolated AP by recounting detections above every distinct score.
pub fn average_precision(detections: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut scores: Vec<f64> = detections.iter().map(|d| d.0).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for s in scores {
        let kept: Vec<&(f64, bool)> = detections.iter().filter(|d| d.0 >= s).collect();
        let tp = kept.iter().filter(|d| d.1).count();
        let precision = tp as f64 / kept.len() as f64;
        let recall = tp as f64 / num_gt as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Panoptic quality over all (prediction, ground truth) pairs of every
/// image, with counts pooled across images.
pub fn panoptic_quality(images: &[(Vec<Segment>, Vec<Segment>)]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut iou_sum = 0.0;
    for (pred, gt) in images {
        let mut pred_matched = vec![false; pred.len()];
        let mut gt_matched = vec![false; gt.len()];
        for (i, p) in pred.iter().enumerate() {
            for (j, g) in gt.iter().enumerate() {
                if p.category != g.category {
                    continue;
                }
                let inter = p.pixels.iter().filter(|px| g.pixels.contains(px)).count();
                let union = p.pixels.len() + g.pixels.len() - inter;
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    tp += 1;
                    iou_sum += iou;
                    pred_matched[i] = true;
                    gt_matched[j] = true;
                }
            }
        }
        fp += pred_matched.iter().filter(|m| !**m).count();
        fn_ += gt_matched.iter().filter(|m| !**m).count();
    }
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    if denom == 0.0 {
        1.0
    } else {
        iou_sum / denom
    }
}

/// F-measure from raw counts; 1 when there is nothing to find or predict.
pub fn f_measure(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ODS F: for each threshold, count over every pixel of every image, then
/// take the best threshold. `predictions[image][threshold][pixel]`.
pub fn ods_f(predictions: &[Vec<Vec<bool>>], gt: &[Vec<bool>]) -> f64 {
    let thresholds = predictions.first().map_or(0, Vec::len);
    let mut best = 0.0f64;
    for t in 0..thresholds {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (img, g) in predictions.iter().zip(gt) {
            for (&p, &truth) in img[t].iter().zip(g) {
                tp += usize::from(p && truth);
                fp += usize::from(p && !truth);
                fn_ += usize::from(!p && truth);
            }
        }
        best = best.max(f_measure(tp, fp, fn_));
    }
    best
}

/// `Σ_i S_i (base + δ_i) / Σ_i S_i`, i.e. the data-weighted mean of the full
/// client models.
pub fn weighted_model_mean(base: &[f64], deltas: &[Vec<f64>], sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    (0..base.len())
        .map(|j| {
            deltas
                .iter()
                .zip(sizes)
                .map(|(d, &s)| s as f64 * (base[j] + d[j]))
                .sum::<f64>()
                / total as f64
        })
        .collect()
}

/// Weighted mean of vectors with arbitrary nonnegative weights.
pub fn weighted_mean(vectors: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..vectors[0].len())
        .map(|j| vectors.iter().zip(weights).map(|(v, w)| w * v[j]).sum::<f64>() / total)
        .collect()
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}
