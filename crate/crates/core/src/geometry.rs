//! Geometry and time primitives shared by the simulator, network and evaluator.
//!
//! Everything lives in the bird's-eye-view plane: poses and boxes carry no
//! z, pitch or roll. Height survives only as a rasterization channel.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Duration of one LiDAR packet on the simulated clock.
pub const PACKET_US: u64 = 10_000;

/// Radius used when a pedestrian needs an area. Pedestrians are predicted as
/// centroids only.
pub const PEDESTRIAN_RADIUS_M: f64 = 0.4;

/// Microseconds since scenario start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_micros(us: u64) -> Self {
        Timestamp(us)
    }

    pub fn from_secs(s: f64) -> Self {
        Timestamp((s * 1e6).round().max(0.0) as u64)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn secs(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    /// Signed difference `self - earlier` in microseconds.
    pub fn delta_us(self, earlier: Timestamp) -> i64 {
        self.0 as i64 - earlier.0 as i64
    }

    /// Signed difference in seconds.
    pub fn delta_secs(self, earlier: Timestamp) -> f64 {
        self.delta_us(earlier) as f64 * 1e-6
    }

    pub fn plus_micros(self, us: u64) -> Self {
        Timestamp(self.0 + us)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Wraps an angle to (-pi, pi]. Angles already in range are returned unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Rigid 2D pose: position in meters, yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 { x: 0.0, y: 0.0, yaw: 0.0 };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 { x, y, yaw: wrap_angle(yaw) }
    }

    /// `self ∘ other`: `other` expressed in the frame of `self`, mapped out.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    /// Maps a point from the parent frame into this pose's local frame.
    pub fn inverse_transform_point(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Pose of `other` relative to `self`, i.e. `self⁻¹ ∘ other`.
    pub fn relative_to(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::Vehicle, ClassId::Pedestrian, ClassId::Cyclist];

    pub fn index(self) -> usize {
        match self {
            ClassId::Vehicle => 0,
            ClassId::Pedestrian => 1,
            ClassId::Cyclist => 2,
        }
    }

    /// Pedestrians are scored by centroid only; the other classes carry
    /// extents and heading.
    pub fn has_extent(self) -> bool {
        !matches!(self, ClassId::Pedestrian)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Vehicle => "vehicle",
            ClassId::Pedestrian => "pedestrian",
            ClassId::Cyclist => "cyclist",
        }
    }

    /// Extrusion height used by the ray caster.
    pub fn height_m(self) -> f64 {
        match self {
            ClassId::Vehicle => 1.8,
            ClassId::Pedestrian => 1.7,
            ClassId::Cyclist => 1.6,
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An oriented rectangle in the BEV plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, heading: f64) -> Self {
        OrientedBox { cx, cy, length, width, heading }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length * 0.5, self.width * 0.5);
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        local.map(|(lx, ly)| (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly))
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.length * 0.5 && ly.abs() <= self.width * 0.5
    }

    /// Applies a rigid transform to the box.
    pub fn transformed(&self, pose: &Pose2) -> OrientedBox {
        let (x, y) = pose.transform_point(self.cx, self.cy);
        OrientedBox::new(x, y, self.length, self.width, wrap_angle(self.heading + pose.yaw))
    }
}

/// Signed area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Sutherland-Hodgman clipping of `subject` against a convex, counter-clockwise `clip`.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Intersection-over-union of two oriented rectangles.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // cheap reject on bounding circles
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn centroid_distance(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    (ax - bx).hypot(ay - by)
}

/// A decoded detection in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub class: ClassId,
    pub cx: f64,
    pub cy: f64,
    pub length: Option<f64>,
    pub width: Option<f64>,
    pub heading: Option<f64>,
    pub score: f64,
    pub emitted_at: Timestamp,
}

impl DetBox {
    pub fn oriented(&self) -> Option<OrientedBox> {
        match (self.length, self.width, self.heading) {
            (Some(l), Some(w), Some(h)) => Some(OrientedBox::new(self.cx, self.cy, l, w, h)),
            _ => None,
        }
    }
}

/// One knot of a continuous-time actor trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub t: Timestamp,
    pub pose: Pose2,
    /// World-frame velocity, m/s.
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl TrackState {
    /// Constant-velocity, constant-yaw-rate propagation by `dt` seconds.
    pub fn propagate(&self, dt: f64) -> Pose2 {
        if dt == 0.0 {
            return self.pose;
        }
        Pose2::new(
            self.pose.x + self.vx * dt,
            self.pose.y + self.vy * dt,
            self.pose.yaw + self.yaw_rate * dt,
        )
    }
}

/// Ground-truth trajectory of one actor, queryable at any timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub actor_id: u32,
    pub class: ClassId,
    pub length: f64,
    pub width: f64,
    pub states: Vec<TrackState>,
}

impl LabelTrack {
    pub fn first_time(&self) -> Timestamp {
        self.states.first().map(|s| s.t).unwrap_or_default()
    }

    pub fn last_time(&self) -> Timestamp {
        self.states.last().map(|s| s.t).unwrap_or_default()
    }

    /// Whether the actor exists at `t` (between its first and last knot).
    pub fn is_live(&self, t: Timestamp) -> bool {
        !self.states.is_empty() && t >= self.first_time() && t <= self.last_time()
    }

    /// Pose at `t`, extrapolated from the latest knot at or before `t`.
    /// Queries up to one packet duration outside the knot span are allowed.
    pub fn state_at(&self, t: Timestamp) -> Result<Pose2> {
        let (first, last) = match (self.states.first(), self.states.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Config(format!("track {} has no states", self.actor_id))),
        };
        let lo = first.t.0 as i64 - PACKET_US as i64;
        let hi = (last.t.0 + PACKET_US) as i64;
        let tq = t.0 as i64;
        if tq < lo || tq > hi {
            return Err(Error::OutOfRange { t_us: tq, lo_us: lo, hi_us: hi });
        }
        let idx = self.states.partition_point(|s| s.t <= t);
        let knot = if idx == 0 { first } else { &self.states[idx - 1] };
        Ok(knot.propagate(t.delta_secs(knot.t)))
    }

    pub fn box_at(&self, t: Timestamp) -> Result<OrientedBox> {
        let p = self.state_at(t)?;
        Ok(OrientedBox::new(p.x, p.y, self.length, self.width, p.yaw))
    }
}

/// One LiDAR return in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub t: Timestamp,
}

/// One rolling-shutter sector of returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub sweep: u32,
    /// Index within the sweep.
    pub index: u32,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    /// Ego pose at `t_end`.
    pub ego_pose: Pose2,
    /// Sensor-frame azimuth where the sector starts, radians.
    pub azimuth_start: f64,
    pub azimuth_span: f64,
    pub points: Vec<LidarPoint>,
}

impl Packet {
    /// Global packet number since scenario start.
    pub fn global_index(&self, packets_per_sweep: u32) -> u64 {
        self.sweep as u64 * packets_per_sweep as u64 + self.index as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(1.5, -2.0, 0.3);
        assert_eq!(Pose2::IDENTITY.compose(&p), p);
        let t = Pose2::new(1.0, 0.0, 0.0).compose(&Pose2::new(2.0, 0.0, 0.0));
        assert_eq!(t, Pose2::new(3.0, 0.0, 0.0));
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert!(close(r.x, 0.0, 1e-15) && close(r.y, 1.0, 1e-15) && close(r.yaw, FRAC_PI_2, 0.0));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!(close(wrap_angle(-PI), PI, 1e-15));
        assert!(close(wrap_angle(3.0 * PI), PI, 1e-12));
        assert!(close(wrap_angle(2.0 * PI + 0.5), 0.5, 1e-12));
        assert!(close(wrap_angle(-2.0 * PI - 0.5), -0.5, 1e-12));
    }

    #[test]
    fn inverse_roundtrip() {
        let p = Pose2::new(3.0, -1.0, 2.5);
        let q = p.compose(&p.inverse());
        assert!(close(q.x, 0.0, 1e-12) && close(q.y, 0.0, 1e-12) && close(q.yaw, 0.0, 1e-12));
        let (lx, ly) = p.inverse_transform_point(4.0, 7.0);
        let (wx, wy) = p.transform_point(lx, ly);
        assert!(close(wx, 4.0, 1e-12) && close(wy, 7.0, 1e-12));
    }

    fn track(vx: f64, yaw_rate: f64) -> LabelTrack {
        let s0 = TrackState { t: Timestamp(0), pose: Pose2::IDENTITY, vx, vy: 0.0, yaw_rate };
        let mut s1 = s0;
        s1.t = Timestamp(2_000_000);
        s1.pose = s0.propagate(2.0);
        LabelTrack { actor_id: 1, class: ClassId::Vehicle, length: 4.8, width: 2.0, states: vec![s0, s1] }
    }

    #[test]
    fn track_examples() {
        let still = track(0.0, 0.0);
        assert_eq!(still.state_at(Timestamp(1_234_567)).unwrap(), Pose2::IDENTITY);
        let moving = track(10.0, 0.0);
        let p = moving.state_at(Timestamp(100_000)).unwrap();
        assert!(close(p.x, 1.0, 1e-12) && p.y == 0.0);
        let spin = track(0.0, 1.0);
        assert!(close(spin.state_at(Timestamp(500_000)).unwrap().yaw, 0.5, 1e-12));
    }

    #[test]
    fn track_horizon() {
        let t = track(1.0, 0.0);
        assert!(t.state_at(Timestamp(2_010_000)).is_ok());
        assert!(matches!(t.state_at(Timestamp(2_010_001)), Err(Error::OutOfRange { .. })));
        let mut late = t.clone();
        for s in &mut late.states {
            s.t = Timestamp(s.t.0 + 50_000);
        }
        assert!(late.state_at(Timestamp(40_000)).is_ok());
        assert!(late.state_at(Timestamp(39_999)).is_err());
    }

    #[test]
    fn track_exact_at_knots() {
        let t = track(3.3, 0.7);
        for s in &t.states {
            assert_eq!(t.state_at(s.t).unwrap(), s.pose);
        }
    }

    #[test]
    fn iou_examples() {
        let a = OrientedBox::new(0.0, 0.0, 4.8, 2.0, 0.3);
        assert!(close(rotated_iou(&a, &a), 1.0, 1e-12));
        let far = OrientedBox::new(50.0, 0.0, 4.8, 2.0, 0.3);
        assert_eq!(rotated_iou(&a, &far), 0.0);
        let b = OrientedBox::new(0.0, 0.0, 4.8, 2.0, 0.0);
        let shifted = OrientedBox::new(1.0, 0.0, 4.8, 2.0, 0.0);
        assert!(close(rotated_iou(&b, &shifted), 7.6 / 11.6, 1e-12));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(centroid_distance(1.0, 1.0, 1.0, 1.0), 0.0);
        assert_eq!(centroid_distance(0.0, 0.0, 3.0, 4.0), 5.0);
        assert!(close(centroid_distance(1.0, 1.0, 1.3, 1.4), 0.5, 1e-12));
    }
}
