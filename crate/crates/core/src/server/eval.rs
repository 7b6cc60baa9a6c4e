//! Validation metrics of a task model on held-out data.

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::metrics::{self, LabelMap, MetricKind, ScoredDetections, ThresholdedImage};
use crate::model::{self, Architecture, HeadKind, ModelParams};
use crate::taskgen::{argmax, TaskDataset, TaskSpec};

/// Samples grouped into one "image" for the ODS F-measure.
const ODS_IMAGE_SIZE: usize = 10;

fn ods_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// Per-site class predictions and labels, flattened row-major.
fn site_labels(output: &[f64], targets: &[f64], classes: usize) -> (Vec<usize>, Vec<usize>) {
    let pred = output.chunks(classes).map(argmax).collect();
    let gt = targets.chunks(classes).map(argmax).collect();
    (pred, gt)
}

/// Scores `params` on `data` with the task's metric.
pub fn evaluate(params: &ModelParams, arch: &Architecture, spec: &TaskSpec, data: &TaskDataset) -> Result<f64> {
    let output = model::forward(params, arch, &spec.head, &data.inputs)?;
    let out = output.data();
    let y = data.targets.data();
    let n = data.len();
    match (spec.head, spec.metric) {
        (HeadKind::Regression { .. }, MetricKind::Mse) => metrics::mean_squared_error(out, y),
        (HeadKind::Binary, metric) => {
            let gt: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
            match metric {
                MetricKind::Accuracy => {
                    let pred: Vec<usize> = out.iter().map(|&v| usize::from(v > 0.0)).collect();
                    let gt: Vec<usize> = gt.iter().map(|&b| usize::from(b)).collect();
                    metrics::accuracy(&pred, &gt)
                }
                MetricKind::Ap => {
                    let num_gt = gt.iter().filter(|&&b| b).count();
                    let dets = out.iter().copied().zip(gt.iter().copied()).collect();
                    metrics::average_precision(&ScoredDetections::new(dets, num_gt)?)
                }
                MetricKind::Odsf => {
                    let thresholds = ods_thresholds();
                    let probs: Vec<f64> = out.iter().map(|&v| sigmoid(v)).collect();
                    let images: Vec<ThresholdedImage> = probs
                        .chunks(ODS_IMAGE_SIZE)
                        .zip(gt.chunks(ODS_IMAGE_SIZE))
                        .map(|(p, g)| ThresholdedImage {
                            predictions: thresholds
                                .iter()
                                .map(|&t| p.iter().map(|&v| v >= t).collect())
                                .collect(),
                            gt: g.to_vec(),
                        })
                        .collect();
                    metrics::ods_f(&images)
                }
                other => Err(unsupported(spec, other)),
            }
        }
        (HeadKind::Classification { classes }, metric) => {
            let (pred, gt) = site_labels(out, y, classes);
            match metric {
                MetricKind::Accuracy => metrics::accuracy(&pred, &gt),
                MetricKind::Miou => metrics::miou(
                    &LabelMap::new(pred, vec![n], classes)?,
                    &LabelMap::new(gt, vec![n], classes)?,
                ),
                other => Err(unsupported(spec, other)),
            }
        }
        (HeadKind::PerPosition { positions, classes }, metric) => {
            let (pred, gt) = site_labels(out, y, classes);
            match metric {
                MetricKind::Accuracy => metrics::accuracy(&pred, &gt),
                MetricKind::Miou => metrics::miou(
                    &LabelMap::new(pred, vec![n, positions], classes)?,
                    &LabelMap::new(gt, vec![n, positions], classes)?,
                ),
                MetricKind::Pq => {
                    let images: Vec<_> = pred
                        .chunks(positions)
                        .zip(gt.chunks(positions))
                        .map(|(p, g)| (metrics::runs_to_segments(p), metrics::runs_to_segments(g)))
                        .collect();
                    Ok(metrics::panoptic_quality_pooled(&images)?.pq)
                }
                other => Err(unsupported(spec, other)),
            }
        }
        (_, other) => Err(unsupported(spec, other)),
    }
}

fn unsupported(spec: &TaskSpec, metric: MetricKind) -> Error {
    Error::invalid(format!(
        "task {}: metric {} does not apply to this head",
        spec.task_id,
        metric.name()
    ))
}
