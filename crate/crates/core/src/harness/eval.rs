//! mAP@IoU evaluation with all-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::detector::{iou, BoundingBox, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// `None` for classes without ground truth; those are left out of `map`.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

/// Average precision of one class.
///
/// Detections from all images are ranked by score (ties: lower image index,
/// then earlier detection). Each is matched to the unmatched ground truth of
/// its image with the highest IoU; a match needs IoU >= `iou_threshold`.
/// AP sums the interpolated precision `max_{j >= i} p_j` at every true
/// positive rank `i` and divides by the number of ground truths.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoundingBox>],
    class_id: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let num_gt = ground_truth.iter().flatten().filter(|b| b.class_id == class_id).count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, f64)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.bbox.class_id == class_id)
                .map(move |(j, d)| (img, j, d.score))
        })
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for &(img, j, _) in &ranked {
        let det = &detections[img][j].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in ground_truth.get(img).map_or(&[][..], Vec::as_slice).iter().enumerate() {
            if gt.class_id != class_id || used[img][k] {
                continue;
            }
            let v = iou(det, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        let hit = match best {
            Some((k, v)) if v >= iou_threshold => {
                used[img][k] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }

    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = hits.iter().zip(&precision).filter(|(h, _)| **h).map(|(_, p)| *p).sum();
    Some(total / num_gt as f64)
}

pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoundingBox>],
    num_classes: usize,
    iou_threshold: f64,
) -> MapReport {
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(detections, ground_truth, c, iou_threshold))
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapReport { per_class_ap, map }
}
