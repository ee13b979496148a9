//! Segmentation and detection metrics plus model/human agreement statistics.

mod ap;
mod consistency;

pub use ap::{average_precision, coco_summary, ApSummary, Detection, GroundTruth, Region, IOU_THRESHOLDS};
pub use consistency::{human_consistency, AccuracyAveraging, ConsistencyReport, DecisionRecord};

use crate::error::{Error, Result};
use crate::part_data::{BinaryMask, CompositeMask, LabelGrid};

/// `|a ∩ b| / |a ∪ b|`, zero when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let union = a.union_area(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_area(b)? as f64 / union as f64)
}

/// IoU of two `[x0, y0, x1, y1]` boxes in continuous coordinates.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean IoU over the labels that occur in `target` (background included).
pub fn miou(pred: &LabelGrid, target: &CompositeMask) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Dimension(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    let k = target.num_channels();
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    let mut present = vec![false; k];
    for (&p, &t) in pred.data().iter().zip(target.labels.data()) {
        present[t] = true;
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            union[t] += 1;
            if p < k {
                union[p] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..k).filter(|&c| present[c]).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if ious.is_empty() {
        return Err(Error::EmptyInput("target has no pixels".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
