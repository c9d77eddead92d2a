use crate::geometry::ClassId;
use crate::net::{encode_heading, AnchorGrid};
use crate::sim::Label;

/// Supervision for one class over the anchor region.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    pub positive: Vec<bool>,
    /// `[dx, dy, log w, log l, theta1, theta2]`, meaningful only at positives.
    pub regression: Vec<[f64; 6]>,
    /// Distance from label centroid to the anchor center, for resolving
    /// several labels landing in one cell.
    dist: Vec<f64>,
}

impl ClassTargets {
    fn new(n: usize) -> Self {
        ClassTargets { positive: vec![false; n], regression: vec![[0.0; 6]; n], dist: vec![f64::INFINITY; n] }
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, &[f64; 6])> + '_ {
        self.positive.iter().enumerate().filter(|(_, &p)| p).map(move |(c, _)| (c, &self.regression[c]))
    }

    /// Every non-positive cell.
    pub fn negatives(&self) -> Vec<usize> {
        self.positive.iter().enumerate().filter(|(_, &p)| !p).map(|(c, _)| c).collect()
    }
}

/// Per-anchor, per-class targets. Cells are indexed `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub width: usize,
    pub height: usize,
    pub classes: [ClassTargets; 3],
    /// Labels whose centroid fell outside the grid.
    pub skipped: usize,
    /// Actor ids that produced a positive.
    pub assigned: Vec<u32>,
}

impl TargetMap {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        TargetMap {
            width,
            height,
            classes: [ClassTargets::new(n), ClassTargets::new(n), ClassTargets::new(n)],
            skipped: 0,
            assigned: Vec::new(),
        }
    }

    pub fn class(&self, c: ClassId) -> &ClassTargets {
        &self.classes[c.index()]
    }

    pub fn positive_count(&self) -> usize {
        self.classes.iter().map(|c| c.positive.iter().filter(|&&p| p).count()).sum()
    }
}

/// The anchor containing each label centroid becomes positive for that class;
/// every other cell is a negative. Labels are world-frame; only those inside
/// the anchor region are used. When two labels share a cell the one closer
/// to its center wins.
pub fn assign_targets(labels: &[Label], anchors: &AnchorGrid) -> TargetMap {
    let (w, h) = (anchors.region.width(), anchors.region.height());
    let mut t = TargetMap::empty(w, h);
    let mut winners: Vec<(usize, usize, u32)> = Vec::new();
    for l in labels {
        let local = anchors.frame_pose.relative_to(&l.pose);
        if anchors.spec.cell_of(local.x, local.y).is_none() {
            t.skipped += 1;
            continue;
        }
        let Some((i, j)) = anchors.locate(local.x, local.y) else { continue };
        let cell = j * w + i;
        let (ax, ay) = anchors.center(i, j);
        let (dx, dy) = (local.x - ax, local.y - ay);
        let ct = &mut t.classes[l.class.index()];
        let d = dx.hypot(dy);
        if d >= ct.dist[cell] {
            continue;
        }
        let (t1, t2) = encode_heading(local.yaw);
        ct.positive[cell] = true;
        ct.dist[cell] = d;
        ct.regression[cell] = [dx, dy, l.width.ln(), l.length.ln(), t1, t2];
        winners.retain(|&(c, k, _)| !(c == l.class.index() && k == cell));
        winners.push((l.class.index(), cell, l.actor_id));
    }
    t.assigned = winners.into_iter().map(|(_, _, id)| id).collect();
    t.assigned.sort_unstable();
    t
}
