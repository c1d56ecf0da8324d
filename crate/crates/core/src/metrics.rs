//! Tracking accuracy: mean IoU, center precision and success AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BBox;

/// Center-distance threshold for precision, in pixels.
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
/// IoU thresholds `0, 0.05, ..., 1` for the success curve.
pub const SUCCESS_STEPS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_iou: f64,
    /// Fraction of frames whose center error is at most 20 px.
    pub precision: f64,
    /// Mean success rate over the IoU thresholds.
    pub success_auc: f64,
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Success is `IoU >= threshold`, so perfect overlap scores 1 at every
/// threshold including 1.
pub fn eval_metrics(pred: &[BBox], gt: &[BBox]) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(Error::invalid("eval_metrics", "no frames"));
    }
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "eval_metrics",
            format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len()),
        ));
    }
    let n = pred.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let mean_iou = ious.iter().sum::<f64>() / n;
    let precision = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| center_error(p, g) <= PRECISION_THRESHOLD_PX)
        .count() as f64
        / n;
    let success_auc = (0..SUCCESS_STEPS)
        .map(|i| {
            let t = i as f64 / (SUCCESS_STEPS - 1) as f64;
            ious.iter().filter(|&&v| v >= t - 1e-12).count() as f64 / n
        })
        .sum::<f64>()
        / SUCCESS_STEPS as f64;
    Ok(Metrics {
        mean_iou,
        precision,
        success_auc,
    })
}
