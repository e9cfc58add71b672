//! Confusion-matrix segmentation metrics: mean intersection-over-union,
//! pixel accuracy, and mean per-class pixel accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelMap;

/// The three standard segmentation scores, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub pa: f64,
    pub mpa: f64,
}

/// C x C confusion counts: `counts[gt][pred]`. Pixels whose ground truth
/// carries the ignore sentinel are skipped.
pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let g = gt.get(y, x);
            if g == gt.ignore_value() {
                continue;
            }
            let p = pred.get(y, x);
            if g as usize >= num_classes {
                return Err(Error::validation(format!(
                    "ground-truth label {g} outside {num_classes} classes"
                )));
            }
            if p as usize >= num_classes {
                return Err(Error::validation(format!(
                    "predicted label {p} outside {num_classes} classes"
                )));
            }
            counts[g as usize][p as usize] += 1;
        }
    }
    Ok(counts)
}

/// Metrics over a prediction/ground-truth pair.
///
/// mIoU averages IoU over classes present in prediction or ground truth
/// (union > 0); mPA averages accuracy over classes present in the ground
/// truth. Both conventions avoid 0/0 for absent classes.
pub fn segmentation_metrics(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<SegMetrics> {
    let counts = confusion_matrix(pred, gt, num_classes)?;
    metrics_from_confusion(&counts)
}

/// Compute the scores from an existing confusion matrix.
pub fn metrics_from_confusion(counts: &[Vec<u64>]) -> Result<SegMetrics> {
    let c = counts.len();
    let mut total = 0u64;
    let mut correct = 0u64;
    let mut iou_sum = 0.0;
    let mut iou_classes = 0usize;
    let mut acc_sum = 0.0;
    let mut acc_classes = 0usize;

    for class in 0..c {
        let tp = counts[class][class];
        let gt_count: u64 = counts[class].iter().sum();
        let pred_count: u64 = (0..c).map(|g| counts[g][class]).sum();
        let union = gt_count + pred_count - tp;

        total += gt_count;
        correct += tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            iou_classes += 1;
        }
        if gt_count > 0 {
            acc_sum += tp as f64 / gt_count as f64;
            acc_classes += 1;
        }
    }

    if total == 0 {
        return Err(Error::validation(
            "metrics over an empty (all-ignored) label map".to_string(),
        ));
    }
    Ok(SegMetrics {
        miou: 100.0 * iou_sum / iou_classes.max(1) as f64,
        pa: 100.0 * correct as f64 / total as f64,
        mpa: 100.0 * acc_sum / acc_classes.max(1) as f64,
    })
}
