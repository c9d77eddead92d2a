use std::cmp::Ordering;

use super::config::{NetConfig, CYCLIST_OFFSET, FUSED_SCALE, PEDESTRIAN_OFFSET, VEHICLE_OFFSET};
use crate::bev::{GridSpec, RegionRect};
use crate::geometry::{centroid_distance, rotated_iou, wrap_angle, ClassId, DetBox, Pose2, Timestamp};
use crate::tensor::{Scalar, Tensor};

/// Geometry of the fused grid cells ("anchors") covered by a header pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorGrid {
    pub spec: GridSpec,
    pub region: RegionRect,
    /// Frame the anchor centers are expressed in.
    pub frame_pose: Pose2,
}

impl AnchorGrid {
    pub fn new(cfg: &NetConfig, region: RegionRect, frame_pose: Pose2) -> Self {
        AnchorGrid { spec: cfg.scale_spec(FUSED_SCALE), region, frame_pose }
    }

    /// Ego-frame center of region-relative anchor `(i, j)` = (column, row).
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        self.spec.cell_center(self.region.x0 + i, self.region.y0 + j)
    }

    /// Region-relative anchor containing an ego-frame point.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (ix, iy) = self.spec.cell_of(x, y)?;
        if !self.region.contains(ix, iy) {
            return None;
        }
        Some((ix - self.region.x0, iy - self.region.y0))
    }
}

pub fn class_offset(class: ClassId) -> usize {
    match class {
        ClassId::Vehicle => VEHICLE_OFFSET,
        ClassId::Pedestrian => PEDESTRIAN_OFFSET,
        ClassId::Cyclist => CYCLIST_OFFSET,
    }
}

/// `(theta1, theta2)` for a heading; [`decode_boxes`] inverts it with atan2.
pub fn encode_heading(phi: f64) -> (f64, f64) {
    phi.sin_cos()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Log-dimensions are clamped so a wild activation still yields a finite box.
const LOG_DIM_LIMIT: f64 = 5.0;

/// Turns header activations into world-frame boxes scoring at least `threshold`.
pub fn decode_boxes<T: Scalar>(header: &Tensor<T>, anchors: &AnchorGrid, threshold: f64, emitted_at: Timestamp) -> Vec<DetBox> {
    let (_, h, w) = header.chw();
    let pose = anchors.frame_pose;
    let mut out = Vec::new();
    for class in ClassId::ALL {
        let o = class_offset(class);
        for j in 0..h {
            for i in 0..w {
                let score = sigmoid(header.at3(o, j, i).f64());
                if score < threshold {
                    continue;
                }
                let (ax, ay) = anchors.center(i, j);
                let (bx, by) = (ax + header.at3(o + 1, j, i).f64(), ay + header.at3(o + 2, j, i).f64());
                let (cx, cy) = pose.transform_point(bx, by);
                let mut det = DetBox {
                    class,
                    cx,
                    cy,
                    length: None,
                    width: None,
                    heading: None,
                    score,
                    emitted_at,
                };
                if class.has_extent() {
                    let lw = header.at3(o + 3, j, i).f64().clamp(-LOG_DIM_LIMIT, LOG_DIM_LIMIT);
                    let ll = header.at3(o + 4, j, i).f64().clamp(-LOG_DIM_LIMIT, LOG_DIM_LIMIT);
                    let phi = header.at3(o + 5, j, i).f64().atan2(header.at3(o + 6, j, i).f64());
                    det.width = Some(lw.exp());
                    det.length = Some(ll.exp());
                    det.heading = Some(wrap_angle(phi + pose.yaw));
                }
                out.push(det);
            }
        }
    }
    out
}

fn suppresses(a: &DetBox, b: &DetBox, iou: f64, ped_dist: f64) -> bool {
    if a.class != b.class {
        return false;
    }
    match (a.oriented(), b.oriented()) {
        (Some(ba), Some(bb)) => rotated_iou(&ba, &bb) > iou,
        _ => centroid_distance(a.cx, a.cy, b.cx, b.cy) < ped_dist,
    }
}

/// Greedy per-class suppression in descending score (stable for ties).
pub fn nms(mut dets: Vec<DetBox>, iou: f64, ped_dist: f64) -> Vec<DetBox> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut keep: Vec<DetBox> = Vec::with_capacity(dets.len());
    for d in dets {
        if !keep.iter().any(|k| suppresses(k, &d, iou, ped_dist)) {
            keep.push(d);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> AnchorGrid {
        let cfg = NetConfig::full();
        AnchorGrid::new(&cfg, RegionRect { x0: 0, y0: 0, x1: 180, y1: 180 }, Pose2::IDENTITY)
    }

    fn header_with(i: usize, j: usize, vals: &[(usize, f32)]) -> Tensor<f32> {
        let mut t = Tensor::full(&[17, 4, 4], -20.0f32);
        for c in [1, 2, 3, 4, 5, 6, 8, 9, 11, 12, 13, 14, 15, 16] {
            for y in 0..4 {
                for x in 0..4 {
                    t.set3(c, y, x, 0.0);
                }
            }
        }
        for &(c, v) in vals {
            t.set3(c, j, i, v);
        }
        t
    }

    #[test]
    fn anchor_offset_example() {
        // shift the grid so cell (105, 94) is centered on (12.4, 3.2)
        let mut g = grid();
        g.spec.origin_y = -72.4;
        let (ax, ay) = g.center(105, 94);
        assert!((ax - 12.4).abs() < 1e-9 && (ay - 3.2).abs() < 1e-9, "{ax} {ay}");
        let sub = AnchorGrid { region: RegionRect { x0: 104, y0: 92, x1: 108, y1: 96 }, ..g };
        assert_eq!(sub.locate(12.4, 3.2), Some((1, 2)));
        let h = header_with(1, 2, &[(0, 5.0), (1, 0.1), (2, -0.2)]);
        let d = decode_boxes(&h, &sub, 0.5, Timestamp(0));
        assert_eq!(d.len(), 1);
        assert!((d[0].cx - 12.5).abs() < 1e-6 && (d[0].cy - 3.0).abs() < 1e-6);
        assert_eq!(d[0].length, Some(1.0));
        assert!((d[0].score - sigmoid(5.0)).abs() < 1e-12);
    }

    #[test]
    fn heading_quadrants() {
        let g = grid();
        let h = header_with(0, 0, &[(0, 5.0), (5, 0.7), (6, 0.7)]);
        let d = decode_boxes(&h, &g, 0.5, Timestamp(0));
        assert!((d[0].heading.unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-6);
        let h = header_with(0, 0, &[(0, 5.0), (5, 0.5), (6, -0.5)]);
        let d = decode_boxes(&h, &g, 0.5, Timestamp(0));
        assert!((d[0].heading.unwrap() - 3.0 * std::f64::consts::FRAC_PI_4).abs() < 1e-6);
    }

    #[test]
    fn pedestrians_have_no_extent() {
        let h = header_with(0, 0, &[(7, 5.0)]);
        let d = decode_boxes(&h, &grid(), 0.5, Timestamp(0));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, ClassId::Pedestrian);
        assert!(d[0].length.is_none() && d[0].heading.is_none());
    }

    #[test]
    fn nms_examples() {
        let a = DetBox {
            class: ClassId::Vehicle,
            cx: 1.0,
            cy: 2.0,
            length: Some(4.8),
            width: Some(2.0),
            heading: Some(0.3),
            score: 0.8,
            emitted_at: Timestamp(0),
        };
        assert_eq!(nms(vec![a], 0.3, 0.5), vec![a]);
        let b = DetBox { score: 0.9, ..a };
        assert_eq!(nms(vec![a, b], 0.3, 0.5), vec![b]);
        let c = DetBox { class: ClassId::Cyclist, ..a };
        assert_eq!(nms(vec![a, c], 0.3, 0.5).len(), 2);
    }
}
