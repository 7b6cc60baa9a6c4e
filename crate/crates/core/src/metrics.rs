//! Evaluation metrics: mIoU, average precision, panoptic quality, ODS
//! F-measure, plus accuracy and mean squared error.
//!
//! All functions are pure. Counting is done in integers and every float
//! reduction runs in a fixed order.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mse,
    Accuracy,
    Miou,
    Ap,
    Pq,
    Odsf,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Mse)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Miou => "miou",
            MetricKind::Ap => "ap",
            MetricKind::Pq => "pq",
            MetricKind::Odsf => "odsf",
        }
    }
}

/// Integer class ids over a 1-D or 2-D index domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    values: Vec<usize>,
    shape: Vec<usize>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(values: Vec<usize>, shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::invalid(format!("label map shape {shape:?} must be 1-D or 2-D")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::LengthMismatch {
                what: "label map",
                expected: shape.iter().product(),
                actual: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|&&v| v >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            values,
            shape,
            num_classes,
        })
    }

    pub fn from_slice(values: &[usize], num_classes: usize) -> Result<Self> {
        Self::new(values.to_vec(), vec![values.len()], num_classes)
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Mean intersection-over-union across classes. Classes absent from both
/// maps are left out of the mean.
pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.shape != gt.shape || pred.num_classes != gt.num_classes {
        return Err(Error::ShapeMismatch {
            op: "miou",
            left: pred.shape.clone(),
            right: gt.shape.clone(),
        });
    }
    let k = pred.num_classes;
    let mut inter = vec![0u64; k];
    let mut pred_count = vec![0u64; k];
    let mut gt_count = vec![0u64; k];
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let union = pred_count[c] + gt_count[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

/// Detections with a score and a true-positive flag assigned by an upstream
/// matcher, plus the total number of ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetections {
    detections: Vec<(f64, bool)>,
    num_gt: usize,
}

impl ScoredDetections {
    pub fn new(detections: Vec<(f64, bool)>, num_gt: usize) -> Result<Self> {
        if detections.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: "average_precision",
            });
        }
        let tp = detections.iter().filter(|(_, t)| *t).count();
        if tp > num_gt {
            return Err(Error::invalid(format!(
                "{tp} true positives exceed {num_gt} ground-truth instances"
            )));
        }
        Ok(Self { detections, num_gt })
    }

    pub fn detections(&self) -> &[(f64, bool)] {
        &self.detections
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }
}

/// Non-interpolated average precision: `Σ (R_n − R_{n−1}) P_n` over the
/// distinct scores in descending order, with `R_0 = 0`. Detections with
/// equal scores enter at the same threshold.
pub fn average_precision(d: &ScoredDetections) -> Result<f64> {
    if d.num_gt == 0 {
        return Err(Error::invalid(
            "average precision needs at least one ground-truth instance",
        ));
    }
    let mut sorted = d.detections.clone();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / d.num_gt as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// One labeled region of a panoptic segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: u32,
    pub category: usize,
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PanopticQuality {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PanopticQuality {
    fn from_counts(tp: u64, fp: u64, fn_: u64, iou_sum: f64) -> Self {
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        if denom == 0.0 {
            // Nothing predicted and nothing to find.
            return Self {
                pq: 1.0,
                dq: 1.0,
                sq: 1.0,
                tp,
                fp,
                fn_,
                iou_sum,
            };
        }
        let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
        Self {
            pq: iou_sum / denom,
            dq: tp as f64 / denom,
            sq,
            tp,
            fp,
            fn_,
            iou_sum,
        }
    }
}

fn validate_side(segments: &[Segment], side: &str) -> Result<HashMap<usize, usize>> {
    let mut owner = HashMap::new();
    let mut ids = std::collections::HashSet::new();
    for (idx, s) in segments.iter().enumerate() {
        if s.pixels.is_empty() {
            return Err(Error::invalid(format!("{side} segment {} is empty", s.id)));
        }
        if !ids.insert(s.id) {
            return Err(Error::invalid(format!("{side} segment id {} repeated", s.id)));
        }
        for &p in &s.pixels {
            if owner.insert(p, idx).is_some() {
                return Err(Error::invalid(format!("{side} segments overlap at pixel {p}")));
            }
        }
    }
    Ok(owner)
}

/// Matched segment pairs and their IoU, in ascending (pred, gt) order.
/// A pair matches when categories agree and IoU > 0.5, which makes the
/// matching one-to-one.
fn match_segments(pred: &[Segment], gt: &[Segment]) -> Result<Vec<(usize, usize, f64)>> {
    validate_side(pred, "predicted")?;
    let gt_owner = validate_side(gt, "ground-truth")?;
    let mut matches = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        let mut overlap: BTreeMap<usize, u64> = BTreeMap::new();
        for px in &p.pixels {
            if let Some(&j) = gt_owner.get(px) {
                *overlap.entry(j).or_default() += 1;
            }
        }
        for (j, inter) in overlap {
            let g = &gt[j];
            if g.category != p.category {
                continue;
            }
            let union = (p.pixels.len() + g.pixels.len()) as u64 - inter;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                matches.push((i, j, iou));
            }
        }
    }
    Ok(matches)
}

/// Panoptic quality of one image.
pub fn panoptic_quality(pred: &[Segment], gt: &[Segment]) -> Result<PanopticQuality> {
    panoptic_quality_pooled(&[(pred.to_vec(), gt.to_vec())])
}

/// Panoptic quality with TP/FP/FN counts and IoU sums pooled over images.
pub fn panoptic_quality_pooled(images: &[(Vec<Segment>, Vec<Segment>)]) -> Result<PanopticQuality> {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let mut iou_sum = 0.0;
    for (pred, gt) in images {
        let matches = match_segments(pred, gt)?;
        for &(_, _, iou) in &matches {
            iou_sum += iou;
        }
        let m = matches.len() as u64;
        tp += m;
        fp += pred.len() as u64 - m;
        fn_ += gt.len() as u64 - m;
    }
    Ok(PanopticQuality::from_counts(tp, fp, fn_, iou_sum))
}

/// Splits a 1-D label sequence into maximal runs, one segment per run.
pub fn runs_to_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.category == c && s.pixels.last() == Some(&(i - 1)) => s.pixels.push(i),
            _ => out.push(Segment {
                id: out.len() as u32,
                category: c,
                pixels: vec![i],
            }),
        }
    }
    out
}

/// Binary predictions of one image at every threshold of a shared grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdedImage {
    pub predictions: Vec<Vec<bool>>,
    pub gt: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn add(&mut self, pred: &[bool], gt: &[bool]) {
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    /// `2PR / (P + R)`; 0 when `P + R = 0`, and 1 when there is nothing to
    /// detect and nothing was predicted.
    pub fn f_measure(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

fn threshold_count(images: &[ThresholdedImage]) -> Result<usize> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("ODS F-measure needs at least one image"))?;
    let n = first.predictions.len();
    if n == 0 {
        return Err(Error::invalid("threshold grid is empty"));
    }
    for (i, img) in images.iter().enumerate() {
        if img.predictions.len() != n {
            return Err(Error::invalid(format!(
                "image {i} has {} thresholds, expected {n}",
                img.predictions.len()
            )));
        }
        if let Some(p) = img.predictions.iter().find(|p| p.len() != img.gt.len()) {
            return Err(Error::ShapeMismatch {
                op: "ods_f",
                left: vec![p.len()],
                right: vec![img.gt.len()],
            });
        }
    }
    Ok(n)
}

/// Dataset-scale optimal F-measure: for each threshold pool the counts over
/// all images, then take the best F across thresholds.
pub fn ods_f(images: &[ThresholdedImage]) -> Result<f64> {
    let n = threshold_count(images)?;
    let mut best = 0.0f64;
    for t in 0..n {
        let mut counts = BinaryCounts::default();
        for img in images {
            counts.add(&img.predictions[t], &img.gt);
        }
        best = best.max(counts.f_measure());
    }
    Ok(best)
}

/// Image-scale optimal F-measure: best threshold per image, averaged.
pub fn ois_f(images: &[ThresholdedImage]) -> Result<f64> {
    let n = threshold_count(images)?;
    let mut sum = 0.0;
    for img in images {
        let mut best = 0.0f64;
        for t in 0..n {
            let mut counts = BinaryCounts::default();
            counts.add(&img.predictions[t], &img.gt);
            best = best.max(counts.f_measure());
        }
        sum += best;
    }
    Ok(sum / images.len() as f64)
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn mean_squared_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mean_squared_error",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        acc += (p - g) * (p - g);
    }
    Ok(acc / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: u32, category: usize, pixels: &[usize]) -> Segment {
        Segment {
            id,
            category,
            pixels: pixels.to_vec(),
        }
    }

    #[test]
    fn miou_hand_example() {
        let pred = LabelMap::from_slice(&[0, 0, 1, 1], 2).unwrap();
        let gt = LabelMap::from_slice(&[0, 1, 1, 1], 2).unwrap();
        assert_eq!(miou(&pred, &gt).unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn miou_perfect_and_absent_classes() {
        let gt = LabelMap::new(vec![0, 2, 2, 0], vec![2, 2], 5).unwrap();
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn miou_rejects_mismatch() {
        let a = LabelMap::from_slice(&[0, 1], 2).unwrap();
        let b = LabelMap::from_slice(&[0, 1, 1], 2).unwrap();
        assert!(miou(&a, &b).is_err());
        assert!(LabelMap::from_slice(&[0, 3], 2).is_err());
    }

    #[test]
    fn ap_hand_example() {
        let d = ScoredDetections::new(vec![(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        assert_eq!(average_precision(&d).unwrap(), 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
    }

    #[test]
    fn ap_perfect_and_monotone_invariance() {
        let d = ScoredDetections::new(vec![(0.3, true), (0.2, true)], 2).unwrap();
        assert_eq!(average_precision(&d).unwrap(), 1.0);

        let raw = vec![(0.9, false), (0.4, true), (0.7, true), (0.1, false), (0.5, true)];
        let rescaled: Vec<_> = raw.iter().map(|&(s, t)| ((3.0f64 * s).exp(), t)).collect();
        let a = average_precision(&ScoredDetections::new(raw, 4).unwrap()).unwrap();
        let b = average_precision(&ScoredDetections::new(rescaled, 4).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ap_requires_ground_truth() {
        let d = ScoredDetections::new(vec![(0.5, false)], 0).unwrap();
        assert!(average_precision(&d).is_err());
        assert!(ScoredDetections::new(vec![(0.5, true)], 0).is_err());
    }

    #[test]
    fn pq_hand_example() {
        // IoU({0,1,2,3}, {0,1,2,3,4}) = 4/5
        let pred = vec![seg(1, 0, &[0, 1, 2, 3]), seg(2, 0, &[10, 11])];
        let gt = vec![seg(1, 0, &[0, 1, 2, 3, 4]), seg(2, 0, &[20, 21])];
        let q = panoptic_quality(&pred, &gt).unwrap();
        assert_eq!((q.tp, q.fp, q.fn_), (1, 1, 1));
        assert_eq!(q.pq, 0.8 / 2.0);
        assert!((q.pq - q.dq * q.sq).abs() < 1e-15);
    }

    #[test]
    fn pq_perfect_and_overlap_rejected() {
        let gt = vec![seg(1, 0, &[0, 1]), seg(2, 1, &[2, 3, 4])];
        assert_eq!(panoptic_quality(&gt, &gt).unwrap().pq, 1.0);
        let overlapping = vec![seg(1, 0, &[0, 1]), seg(2, 1, &[1, 2])];
        assert!(panoptic_quality(&overlapping, &gt).is_err());
        assert!(panoptic_quality(&gt, &overlapping).is_err());
    }

    #[test]
    fn pq_category_must_agree() {
        let pred = vec![seg(1, 1, &[0, 1])];
        let gt = vec![seg(1, 0, &[0, 1])];
        let q = panoptic_quality(&pred, &gt).unwrap();
        assert_eq!((q.tp, q.pq), (0, 0.0));
    }

    #[test]
    fn runs_become_segments() {
        let s = runs_to_segments(&[2, 2, 0, 1, 1, 1, 2]);
        let cats: Vec<_> = s.iter().map(|s| (s.category, s.pixels.len())).collect();
        assert_eq!(cats, vec![(2, 2), (0, 1), (1, 3), (2, 1)]);
    }

    #[test]
    fn ods_single_image() {
        let img = ThresholdedImage {
            predictions: vec![vec![true, true]],
            gt: vec![true, false],
        };
        assert_eq!(ods_f(&[img]).unwrap(), 2.0 * 0.5 * 1.0 / 1.5);
    }

    #[test]
    fn ods_perfect_threshold() {
        let imgs = vec![
            ThresholdedImage {
                predictions: vec![vec![true, true, true], vec![true, false, true]],
                gt: vec![true, false, true],
            },
            ThresholdedImage {
                predictions: vec![vec![true, true, false], vec![false, true, false]],
                gt: vec![false, true, false],
            },
        ];
        assert_eq!(ods_f(&imgs).unwrap(), 1.0);
    }

    #[test]
    fn ods_pools_counts_unlike_ois() {
        // Each image is perfect at a different threshold, so OIS = 1 while
        // pooled counts at either threshold give P = 1, R = 1/2.
        let imgs = vec![
            ThresholdedImage {
                predictions: vec![vec![true], vec![false]],
                gt: vec![true],
            },
            ThresholdedImage {
                predictions: vec![vec![false], vec![true]],
                gt: vec![true],
            },
        ];
        assert_eq!(ois_f(&imgs).unwrap(), 1.0);
        assert_eq!(ods_f(&imgs).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn ods_rejects_empty_dataset() {
        assert!(ods_f(&[]).is_err());
    }

    #[test]
    fn direction_of_metrics() {
        assert!(!MetricKind::Mse.higher_is_better());
        assert!(MetricKind::Miou.higher_is_better());
    }
}
