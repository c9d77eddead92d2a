use std::cmp::Ordering;

use crate::geometry::{centroid_distance, rotated_iou, DetBox, OrientedBox};

/// Match criterion for one class and threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// Rotated IoU at least this value.
    Iou(f64),
    /// Centroid distance at most this many meters.
    Distance(f64),
}

impl Criterion {
    /// Similarity (higher is better) when the pair passes, else `None`.
    fn score(&self, det: &DetBox, label: &OrientedBox) -> Option<f64> {
        match *self {
            Criterion::Iou(t) => {
                let b = det.oriented()?;
                let iou = rotated_iou(&b, label);
                (iou >= t).then_some(iou)
            }
            Criterion::Distance(d) => {
                let dist = centroid_distance(det.cx, det.cy, label.cx, label.cy);
                (dist <= d).then_some(-dist)
            }
        }
    }
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched a don't-care label; neither counted nor penalized.
    Ignored,
}

/// Indices of `dets` in descending score order, ties by position.
pub fn score_order(dets: &[DetBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy matching in descending score: each detection takes its best
/// still-unmatched label that passes `crit`. Returns one outcome per detection
/// (in input order) and the number of labels matched.
pub fn match_and_score(dets: &[DetBox], labels: &[OrientedBox], ignore: &[OrientedBox], crit: Criterion) -> (Vec<Outcome>, usize) {
    let mut taken = vec![false; labels.len()];
    let mut out = vec![Outcome::FalsePositive; dets.len()];
    let mut matched = 0;
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, l) in labels.iter().enumerate() {
            if taken[j] {
                continue;
            }
            if let Some(s) = crit.score(&dets[i], l) {
                if best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((j, s));
                }
            }
        }
        out[i] = match best {
            Some((j, _)) => {
                taken[j] = true;
                matched += 1;
                Outcome::TruePositive
            }
            None if ignore.iter().any(|l| crit.score(&dets[i], l).is_some()) => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
    }
    (out, matched)
}

/// All-point average precision: the precision envelope integrated over
/// recall. `flags` are (score, is true positive). Detections with equal
/// scores form one operating point, so the result does not depend on their
/// order. NaN when there are no labels.
pub fn average_precision(flags: &[(f64, bool)], label_count: usize) -> f64 {
    if label_count == 0 {
        return f64::NAN;
    }
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    // (true positives gained, precision) at the end of each score group
    let mut points: Vec<(usize, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        let before = tp;
        seen += 1;
        tp += hit as usize;
        let gained = tp - before;
        if let Some(last) = points.last_mut().filter(|_| i > 0 && sorted[i - 1].0 == score) {
            last.0 += gained;
            last.1 = tp as f64 / seen as f64;
        } else {
            points.push((gained, tp as f64 / seen as f64));
        }
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for g in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[g] = envelope[g].max(envelope[g + 1]);
    }
    // one term per recovered label, in increasing recall
    let mut area = 0.0;
    for (&(gained, _), &p) in points.iter().zip(&envelope) {
        for _ in 0..gained {
            area += p;
        }
    }
    area / label_count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ClassId, Timestamp};

    fn veh(cx: f64, score: f64) -> DetBox {
        DetBox {
            class: ClassId::Vehicle,
            cx,
            cy: 0.0,
            length: Some(4.8),
            width: Some(2.0),
            heading: Some(0.0),
            score,
            emitted_at: Timestamp(0),
        }
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[(0.9, true), (0.3, true)], 2), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.3, false)], 2), 0.0);
        assert!(average_precision(&[(0.9, false)], 0).is_nan());
        // a tie is one operating point, whatever the order
        let tied = average_precision(&[(0.5, true), (0.5, false)], 1);
        assert_eq!(tied, 0.5);
        assert_eq!(average_precision(&[(0.5, false), (0.5, true)], 1), tied);
    }

    #[test]
    fn matching_examples() {
        let labels = [OrientedBox::new(0.0, 0.0, 4.8, 2.0, 0.0), OrientedBox::new(20.0, 0.0, 4.8, 2.0, 0.0)];
        let (o, m) = match_and_score(&[veh(0.0, 0.9), veh(20.0, 0.8)], &labels, &[], Criterion::Iou(0.7));
        assert_eq!(o, vec![Outcome::TruePositive; 2]);
        assert_eq!(m, 2);
        let (o, _) = match_and_score(&[veh(0.0, 0.9), veh(0.0, 0.8)], &labels[..1], &[], Criterion::Iou(0.5));
        assert_eq!(o, vec![Outcome::TruePositive, Outcome::FalsePositive]);
        // 1 m along-track shift of a 4.8 x 2.0 box: IoU 3.8 / 5.8
        let shifted = veh(1.0, 0.9);
        let iou = rotated_iou(&shifted.oriented().unwrap(), &labels[0]);
        assert!((iou - 3.8 / 5.8).abs() < 1e-9);
        let (o, _) = match_and_score(&[shifted], &labels[..1], &[], Criterion::Iou(0.5));
        assert_eq!(o[0], Outcome::TruePositive);
        let (o, _) = match_and_score(&[shifted], &labels[..1], &[], Criterion::Iou(0.7));
        assert_eq!(o[0], Outcome::FalsePositive);
        let (o, _) = match_and_score(&[shifted], &[], &labels[..1], Criterion::Iou(0.5));
        assert_eq!(o[0], Outcome::Ignored);
    }
}
