//! Brute-force reference implementations for suppression and evaluation.

use std::cmp::Ordering;

use pdaanet_core::detector::Detections;
use pdaanet_core::metrics::Annotations;
use pdaanet_core::synth::{BBox, NUM_CLASSES};

/// Greedy suppression by enumeration: the kept set is the unique subset that
/// is pairwise at or below `t` and suppresses every excluded box through a
/// higher-ranked member. Returns it in rank order. Exponential in `boxes.len()`.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n < 16, "enumeration is only meant for tiny instances");
    let before = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let independent = (0..n).all(|i| (0..n).all(|j| i == j || !inside(i) || !inside(j) || boxes[i].iou(&boxes[j]) <= t));
        let covered = (0..n).all(|i| inside(i) || (0..n).any(|j| inside(j) && before(j, i) && boxes[i].iou(&boxes[j]) > t));
        if independent && covered {
            assert!(found.is_none(), "the kept subset is unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("some subset qualifies");
    let mut kept: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| if before(a, b) { Ordering::Less } else { Ordering::Greater });
    kept
}

/// mAP and recall by recomputing the matching at every score cutoff and
/// integrating the upper envelope of the precision/recall points.
pub fn pr_oracle(dets: &[Detections], truth: &[Annotations], iou_t: f64) -> (f64, f64) {
    let mut aps = Vec::new();
    let mut matched_all = 0;
    let total_gt: usize = truth.iter().map(|t| t.boxes.len()).sum();
    for class in 0..NUM_CLASSES {
        let n_gt: usize = truth.iter().map(|t| t.classes.iter().filter(|&&c| c == class).count()).sum();
        let mut scores: Vec<f64> = dets
            .iter()
            .flat_map(|d| d.classes.iter().zip(&d.scores).filter(|(c, _)| **c == class).map(|(_, s)| *s))
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let tp_at = |cut: f64| -> usize {
            let mut tp = 0;
            for (d, t) in dets.iter().zip(truth) {
                let mut order: Vec<usize> = (0..d.len()).filter(|&j| d.classes[j] == class && d.scores[j] >= cut).collect();
                order.sort_by(|&a, &b| d.scores[b].total_cmp(&d.scores[a]));
                let mut used = vec![false; t.boxes.len()];
                for j in order {
                    let cand = (0..t.boxes.len())
                        .filter(|&g| t.classes[g] == class && !used[g] && d.boxes[j].iou(&t.boxes[g]) >= iou_t)
                        .max_by(|&a, &b| d.boxes[j].iou(&t.boxes[a]).total_cmp(&d.boxes[j].iou(&t.boxes[b])).then(b.cmp(&a)));
                    if let Some(g) = cand {
                        used[g] = true;
                        tp += 1;
                    }
                }
            }
            tp
        };
        let points: Vec<(f64, f64)> = scores
            .iter()
            .enumerate()
            .map(|(m, &s)| {
                let tp = tp_at(s) as f64;
                (tp / (m + 1) as f64, tp / n_gt.max(1) as f64)
            })
            .collect();
        if let Some(&s) = scores.last() {
            matched_all += tp_at(s);
        }
        if n_gt == 0 {
            continue;
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for (m, &(_, r)) in points.iter().enumerate() {
            let envelope = points[m..].iter().map(|p| p.0).fold(0.0, f64::max);
            ap += (r - prev) * envelope;
            prev = r;
        }
        aps.push(ap);
    }
    (aps.iter().sum::<f64>() / aps.len() as f64, matched_all as f64 / total_gt as f64)
}
