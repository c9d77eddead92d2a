//! Deterministic rolling-shutter LiDAR simulator.
//!
//! A 10 Hz spinning sensor emits ten 36° sector packets per sweep. Each ray
//! carries its own timestamp; ego and actor poses are evaluated at that
//! timestamp so fast actors smear inside a packet the way they would on a
//! real spinning sensor. Rays hit actor rectangles extruded to per-class
//! heights, or the flat ground plane.

mod config;
pub mod library;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{default_dims, ActorSpec, EgoSpec, MapSpec, Polygon, ScenarioConfig, SegmentSpec, SensorSpec};

use crate::error::{Error, Result};
use crate::geometry::{ClassId, LabelTrack, LidarPoint, Packet, Pose2, Timestamp, TrackState, PACKET_US};

/// A ground-truth actor state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub actor_id: u32,
    pub class: ClassId,
    pub pose: Pose2,
    pub length: f64,
    pub width: f64,
}

/// Per-packet return statistics of one actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorHits {
    pub actor_id: u32,
    pub points: u32,
    pub t_first: Timestamp,
    pub t_last: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub packet: Packet,
    /// Actors seen at least once so far, evaluated at `packet.t_end`.
    pub labels: Vec<Label>,
    /// Actors with returns in this packet.
    pub hits: Vec<ActorHits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitTarget {
    Ground,
    Actor(u32),
}

/// Exact (double precision) ray-cast return, before quantization to a packet point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: Timestamp,
    pub target: HitTarget,
}

#[derive(Debug, Clone)]
struct EgoPath {
    start: Pose2,
    vertices: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
    speed: f64,
}

impl EgoPath {
    fn new(spec: &EgoSpec) -> Self {
        let mut vertices = vec![(spec.start.x, spec.start.y)];
        vertices.extend(spec.waypoints.iter().map(|w| (w[0], w[1])));
        let mut cumulative = vec![0.0];
        for w in vertices.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cumulative.push(cumulative.last().unwrap() + d);
        }
        EgoPath { start: spec.start, vertices, cumulative, speed: spec.speed }
    }

    fn pose_at(&self, t: Timestamp) -> Pose2 {
        let total = *self.cumulative.last().unwrap();
        if self.vertices.len() < 2 || self.speed == 0.0 || total == 0.0 {
            return self.start;
        }
        let s = (self.speed * t.secs()).min(total);
        let seg = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.vertices.len() - 1) - 1;
        let (a, b) = (self.vertices[seg], self.vertices[seg + 1]);
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let f = if len > 0.0 { (s - self.cumulative[seg]) / len } else { 0.0 };
        Pose2::new(a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), (b.1 - a.1).atan2(b.0 - a.0))
    }
}

/// Builds the continuous-time track of an actor from its spec.
fn build_track(id: u32, spec: &ActorSpec, duration_s: f64) -> LabelTrack {
    let end_s = spec.despawn_s.unwrap_or(duration_s).min(duration_s);
    let mut cur = TrackState {
        t: Timestamp::from_secs(spec.spawn_s),
        pose: Pose2::new(spec.x, spec.y, spec.yaw),
        vx: spec.vx,
        vy: spec.vy,
        yaw_rate: spec.yaw_rate,
    };
    let mut states = vec![cur];
    for seg in spec.segments.iter().filter(|s| s.at_s < end_s) {
        let t = Timestamp::from_secs(seg.at_s);
        cur = TrackState {
            t,
            pose: cur.propagate(t.delta_secs(cur.t)),
            vx: seg.vx,
            vy: seg.vy,
            yaw_rate: seg.yaw_rate,
        };
        states.push(cur);
    }
    let t_end = Timestamp::from_secs(end_s);
    if t_end > cur.t {
        let mut last = cur;
        last.pose = cur.propagate(t_end.delta_secs(cur.t));
        last.t = t_end;
        states.push(last);
    }
    LabelTrack { actor_id: id, class: spec.class, length: spec.length, width: spec.width, states }
}

/// Live actors at `t`. `t` must lie within `[0, end]`.
pub fn labels_at(tracks: &[LabelTrack], t: Timestamp, end: Timestamp) -> Result<Vec<Label>> {
    if t > end {
        return Err(Error::OutOfRange { t_us: t.0 as i64, lo_us: 0, hi_us: end.0 as i64 });
    }
    let mut out = Vec::new();
    for tr in tracks.iter().filter(|tr| tr.is_live(t)) {
        out.push(Label {
            actor_id: tr.actor_id,
            class: tr.class,
            pose: tr.state_at(t)?,
            length: tr.length,
            width: tr.width,
        });
    }
    Ok(out)
}

/// A validated scenario, ready to stream packets.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: ScenarioConfig,
    tracks: Vec<LabelTrack>,
    ego: EgoPath,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let tracks = cfg
            .actors
            .iter()
            .enumerate()
            .map(|(i, a)| build_track(i as u32 + 1, a, cfg.duration_s))
            .collect();
        let ego = EgoPath::new(&cfg.ego);
        Ok(Simulator { cfg, tracks, ego })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[LabelTrack] {
        &self.tracks
    }

    pub fn map(&self) -> &MapSpec {
        &self.cfg.map
    }

    pub fn packet_count(&self) -> u64 {
        self.cfg.packet_count()
    }

    pub fn end_time(&self) -> Timestamp {
        Timestamp(self.packet_count() * PACKET_US)
    }

    pub fn ego_pose_at(&self, t: Timestamp) -> Pose2 {
        self.ego.pose_at(t)
    }

    pub fn frames(&self) -> ScenarioStream<'_> {
        ScenarioStream { sim: self, next: 0, seen: BTreeSet::new() }
    }

    /// Casts every ray of global packet `g`, returning exact hits.
    pub fn cast_packet(&self, g: u64) -> Vec<RayHit> {
        let sensor = &self.cfg.sensor;
        let pps = sensor.packets_per_sweep as u64;
        let k = (g % pps) as f64;
        let span = sensor.sector_span();
        let n_az = sensor.azimuth_steps_per_packet();
        let step = span / n_az as f64;
        let t_start = g * PACKET_US;
        let elevations: Vec<(f64, f64)> =
            sensor.elevations_deg.iter().map(|e| e.to_radians().sin_cos()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(g);

        let mut hits = Vec::new();
        for i in 0..n_az {
            let t = Timestamp(t_start + (i as u64 * PACKET_US) / n_az as u64);
            let ego = self.ego.pose_at(t);
            let heading = ego.yaw + k * span + i as f64 * step;
            let (sa, ca) = heading.sin_cos();
            let boxes: Vec<(u32, Pose2, f64, f64, f64)> = self
                .tracks
                .iter()
                .filter(|tr| tr.is_live(t))
                .filter_map(|tr| {
                    let p = tr.state_at(t).ok()?;
                    Some((tr.actor_id, p, tr.length, tr.width, tr.class.height_m()))
                })
                .collect();
            for &(se, ce) in &elevations {
                // one draw per ray regardless of outcome keeps dropout coupled across probabilities
                let u: f64 = rng.gen();
                let origin = [ego.x, ego.y, sensor.mount_height_m];
                let dir = [ce * ca, ce * sa, se];
                let mut best = sensor.max_range_m;
                let mut target = None;
                if se < 0.0 {
                    let tg = sensor.mount_height_m / -se;
                    if tg <= best {
                        best = tg;
                        target = Some(HitTarget::Ground);
                    }
                }
                for &(id, pose, l, w, h) in &boxes {
                    if let Some(tb) = ray_box(origin, dir, &pose, l, w, h) {
                        if tb < best {
                            best = tb;
                            target = Some(HitTarget::Actor(id));
                        }
                    }
                }
                let Some(target) = target else { continue };
                if u < sensor.dropout {
                    continue;
                }
                let z = if target == HitTarget::Ground { 0.0 } else { origin[2] + best * dir[2] };
                hits.push(RayHit {
                    x: origin[0] + best * dir[0],
                    y: origin[1] + best * dir[1],
                    z,
                    t,
                    target,
                });
            }
        }
        hits
    }

    fn packet_header(&self, g: u64) -> Packet {
        let pps = self.cfg.sensor.packets_per_sweep as u64;
        let span = self.cfg.sensor.sector_span();
        let t_start = Timestamp(g * PACKET_US);
        let t_end = t_start.plus_micros(PACKET_US);
        Packet {
            sweep: (g / pps) as u32,
            index: (g % pps) as u32,
            t_start,
            t_end,
            ego_pose: self.ego.pose_at(t_end),
            azimuth_start: (g % pps) as f64 * span,
            azimuth_span: span,
            points: Vec::new(),
        }
    }

    /// Packet `g` together with per-actor hit statistics.
    pub fn packet(&self, g: u64) -> (Packet, Vec<ActorHits>) {
        let mut packet = self.packet_header(g);
        let hits = self.cast_packet(g);
        let mut per_actor: BTreeMap<u32, ActorHits> = BTreeMap::new();
        packet.points = hits
            .iter()
            .map(|h| {
                if let HitTarget::Actor(id) = h.target {
                    let e = per_actor.entry(id).or_insert(ActorHits {
                        actor_id: id,
                        points: 0,
                        t_first: h.t,
                        t_last: h.t,
                    });
                    e.points += 1;
                    e.t_first = e.t_first.min(h.t);
                    e.t_last = e.t_last.max(h.t);
                }
                LidarPoint { x: h.x as f32, y: h.y as f32, z: h.z as f32, t: h.t }
            })
            .collect();
        (packet, per_actor.into_values().collect())
    }
}

/// Iterator over the frames of a scenario, in emission order.
pub struct ScenarioStream<'a> {
    sim: &'a Simulator,
    next: u64,
    seen: BTreeSet<u32>,
}

impl Iterator for ScenarioStream<'_> {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        if self.next >= self.sim.packet_count() {
            return None;
        }
        let (packet, hits) = self.sim.packet(self.next);
        self.next += 1;
        self.seen.extend(hits.iter().map(|h| h.actor_id));
        let labels = self
            .sim
            .tracks
            .iter()
            .filter(|tr| self.seen.contains(&tr.actor_id) && tr.is_live(packet.t_end))
            .filter_map(|tr| {
                Some(Label {
                    actor_id: tr.actor_id,
                    class: tr.class,
                    pose: tr.state_at(packet.t_end).ok()?,
                    length: tr.length,
                    width: tr.width,
                })
            })
            .collect();
        Some(SimFrame { packet, labels, hits })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.sim.packet_count() - self.next) as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for ScenarioStream<'_> {}

/// Runs the simulator to completion.
pub fn generate_scenario(cfg: ScenarioConfig) -> Result<(Simulator, Vec<SimFrame>)> {
    let sim = Simulator::new(cfg)?;
    let frames = sim.frames().collect();
    Ok((sim, frames))
}

/// Slab test of a ray against a box extruded from z=0 to `height`.
/// Returns the entry distance when the origin lies outside the box.
fn ray_box(origin: [f64; 3], dir: [f64; 3], pose: &Pose2, length: f64, width: f64, height: f64) -> Option<f64> {
    let (lx, ly) = pose.inverse_transform_point(origin[0], origin[1]);
    let (s, c) = pose.yaw.sin_cos();
    let dx = c * dir[0] + s * dir[1];
    let dy = -s * dir[0] + c * dir[1];
    let o = [lx, ly, origin[2]];
    let d = [dx, dy, dir[2]];
    let lo = [-length * 0.5, -width * 0.5, 0.0];
    let hi = [length * 0.5, width * 0.5, height];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t0 = (lo[a] - o[a]) / d[a];
        let t1 = (hi[a] - o[a]) / d[a];
        let (near, far) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(near);
        t_exit = t_exit.min(far);
    }
    if t_enter <= t_exit && t_enter > 0.0 {
        Some(t_enter)
    } else {
        None
    }
}
