//! Detection metrics: per-class average precision at an IoU threshold and recall.

use alloc::vec;
use alloc::vec::Vec;

use crate::detector::Detections;
use crate::synth::{BBox, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: no ground-truth boxes")]
    NoGroundTruth,
    #[error("{detections} detection lists for {truths} ground-truth lists")]
    Mismatch { detections: usize, truths: usize },
}

/// Ground truth of one image for evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub recall: f64,
    /// AP for each class that appears in the ground truth.
    pub per_class_ap: Vec<(usize, f64)>,
}

/// All-point interpolated AP from detection hits in descending-score order.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Greedy matching of score-ranked detections to unmatched ground truth of the
/// same class at IoU `>= iou_t`, per-class all-point AP, and matched-GT recall.
pub fn evaluate_detections(detections: &[Detections], truth: &[Annotations], iou_t: f64) -> Result<EvalReport, MetricError> {
    if detections.len() != truth.len() {
        return Err(MetricError::Mismatch {
            detections: detections.len(),
            truths: truth.len(),
        });
    }
    let total_gt: usize = truth.iter().map(|t| t.boxes.len()).sum();
    if total_gt == 0 {
        return Err(MetricError::NoGroundTruth);
    }
    let mut per_class_ap = Vec::new();
    let mut matched_total = 0;
    for class in 0..NUM_CLASSES {
        let n_gt: usize = truth.iter().map(|t| t.classes.iter().filter(|&&c| c == class).count()).sum();
        // (score, image, detection index)
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, d) in detections.iter().enumerate() {
            for (j, &c) in d.classes.iter().enumerate() {
                if c == class {
                    ranked.push((d.scores[j], img, j));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.boxes.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(_, img, j) in &ranked {
            let b = &detections[img].boxes[j];
            let t = &truth[img];
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in t.boxes.iter().enumerate() {
                if t.classes[g] != class || used[img][g] {
                    continue;
                }
                let iou = b.iou(gb);
                if iou >= iou_t && best.is_none_or(|(_, v)| iou > v) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                used[img][g] = true;
            }
            hits.push(best.is_some());
        }
        let matched = hits.iter().filter(|&&h| h).count();
        matched_total += matched;
        if n_gt > 0 {
            per_class_ap.push((class, average_precision(&hits, n_gt)));
        }
    }
    let map = per_class_ap.iter().map(|(_, ap)| ap).sum::<f64>() / per_class_ap.len() as f64;
    Ok(EvalReport {
        map,
        recall: matched_total as f64 / total_gt as f64,
        per_class_ap,
    })
}
