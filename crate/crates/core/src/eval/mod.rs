//! Latency-aware evaluation: label frames at emission or observation time,
//! greedy matching, all-point AP, reports and latency accounting.

pub mod ap;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassId, DetBox, LabelTrack, OrientedBox, Pose2, Timestamp};
use crate::sim::{ActorHits, SimFrame, Simulator};

pub use ap::{average_precision, match_and_score, Criterion, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Packet,
    Sweep,
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::Packet => "packet",
            StreamMode::Sweep => "sweep",
        }
    }
}

/// Which instant a label box is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// State when the detection was emitted (latency-aware).
    Emission,
    /// State when the actor's points were acquired (common).
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vehicle_iou: [f64; 2],
    pub cyclist_iou: [f64; 2],
    pub pedestrian_dist_m: [f64; 2],
    pub range_cap_m: f64,
    /// Score only actors with no returns in the frame's packets; the rest
    /// become don't-care.
    pub zero_point_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            vehicle_iou: [0.5, 0.7],
            cyclist_iou: [0.3, 0.5],
            pedestrian_dist_m: [0.5, 0.3],
            range_cap_m: 72.0,
            zero_point_only: false,
        }
    }
}

impl EvalConfig {
    pub fn criteria(&self, class: ClassId) -> [Criterion; 2] {
        match class {
            ClassId::Vehicle => self.vehicle_iou.map(Criterion::Iou),
            ClassId::Cyclist => self.cyclist_iou.map(Criterion::Iou),
            ClassId::Pedestrian => self.pedestrian_dist_m.map(Criterion::Distance),
        }
    }

    pub fn thresholds(&self, class: ClassId) -> [f64; 2] {
        match class {
            ClassId::Vehicle => self.vehicle_iou,
            ClassId::Cyclist => self.cyclist_iou,
            ClassId::Pedestrian => self.pedestrian_dist_m,
        }
    }
}

/// Timing and observation bookkeeping of one packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub index: u64,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub ego_pose: Pose2,
    pub azimuth_start: f64,
    pub azimuth_span: f64,
    pub hits: Vec<ActorHits>,
}

/// Everything evaluation needs to know about a scenario: label tracks and
/// which actors were observed when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLabels {
    pub scenario: String,
    pub seed: u64,
    pub packets_per_sweep: u32,
    pub tracks: Vec<LabelTrack>,
    pub packets: Vec<PacketMeta>,
}

impl ScenarioLabels {
    pub fn new(sim: &Simulator, frames: &[SimFrame]) -> Self {
        ScenarioLabels {
            scenario: sim.config().name.clone(),
            seed: sim.config().seed,
            packets_per_sweep: sim.config().sensor.packets_per_sweep,
            tracks: sim.tracks().to_vec(),
            packets: frames
                .iter()
                .map(|f| PacketMeta {
                    index: f.packet.global_index(sim.config().sensor.packets_per_sweep),
                    t_start: f.packet.t_start,
                    t_end: f.packet.t_end,
                    ego_pose: f.packet.ego_pose,
                    azimuth_start: f.packet.azimuth_start,
                    azimuth_span: f.packet.azimuth_span,
                    hits: f.hits.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Packet index ranges making up each evaluation frame.
    pub fn frame_ranges(&self, mode: StreamMode) -> Vec<std::ops::Range<usize>> {
        match mode {
            StreamMode::Packet => (0..self.packets.len()).map(|i| i..i + 1).collect(),
            StreamMode::Sweep => {
                let pps = self.packets_per_sweep as usize;
                (0..self.packets.len() / pps).map(|s| s * pps..(s + 1) * pps).collect()
            }
        }
    }
}

/// Region of the scene a frame is responsible for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Footprint {
    /// Azimuth sector `[start, start + span)` relative to the ego heading.
    Wedge { pose: Pose2, start: f64, span: f64 },
    Disc { pose: Pose2 },
}

impl Footprint {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Disc { .. } => true,
            Footprint::Wedge { pose, start, span } => {
                let (lx, ly) = pose.inverse_transform_point(x, y);
                let a = ly.atan2(lx).rem_euclid(TAU);
                (a - start).rem_euclid(TAU) < span
            }
        }
    }

    /// Whether any part of `b` (center or a corner) lies in the footprint.
    pub fn touches(&self, b: &OrientedBox) -> bool {
        self.contains(b.cx, b.cy) || b.corners().iter().any(|&(x, y)| self.contains(x, y))
    }

    pub fn pose(&self) -> Pose2 {
        match *self {
            Footprint::Wedge { pose, .. } | Footprint::Disc { pose } => pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLabel {
    pub actor_id: u32,
    pub class: ClassId,
    pub bbox: OrientedBox,
}

/// Labels one batch of detections is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrame {
    pub t_emit: Timestamp,
    pub footprint: Footprint,
    pub labels: Vec<FrameLabel>,
    /// Live actors in the footprint that cannot be scored (never observed,
    /// out of range, or filtered), and actors straddling its edge with the
    /// center outside; detections on them are ignored.
    pub ignore: Vec<FrameLabel>,
    /// Span from the first packet start to emission.
    pub accumulation_us: u64,
}

/// Label frame for the packets in `range`, emitted at the end of the last one.
pub fn build_label_frame(
    labels: &ScenarioLabels,
    range: std::ops::Range<usize>,
    mode: LabelMode,
    cfg: &EvalConfig,
) -> Result<LabelFrame> {
    let first = &labels.packets[range.start];
    let last = &labels.packets[range.end - 1];
    let t_emit = last.t_end;
    let footprint = if range.len() == 1 {
        Footprint::Wedge { pose: last.ego_pose, start: last.azimuth_start, span: last.azimuth_span }
    } else {
        Footprint::Disc { pose: last.ego_pose }
    };
    // last observation time per actor up to and including this frame
    let mut observed: BTreeMap<u32, Timestamp> = BTreeMap::new();
    for p in &labels.packets[..range.end] {
        for h in &p.hits {
            observed.insert(h.actor_id, h.t_last);
        }
    }
    let in_frame: Vec<u32> =
        labels.packets[range.clone()].iter().flat_map(|p| p.hits.iter().map(|h| h.actor_id)).collect();
    let ego = last.ego_pose;
    let mut frame = LabelFrame {
        t_emit,
        footprint,
        labels: Vec::new(),
        ignore: Vec::new(),
        accumulation_us: t_emit.micros() - first.t_start.micros(),
    };
    for tr in labels.tracks.iter().filter(|tr| tr.is_live(t_emit)) {
        let at_emit = tr.box_at(t_emit)?;
        let inside = footprint.contains(at_emit.cx, at_emit.cy);
        if !inside && !footprint.touches(&at_emit) {
            continue;
        }
        let seen = observed.get(&tr.actor_id).copied();
        let in_range = (at_emit.cx - ego.x).hypot(at_emit.cy - ego.y) <= cfg.range_cap_m;
        let filtered = cfg.zero_point_only && in_frame.contains(&tr.actor_id);
        let bbox = match (mode, seen) {
            (LabelMode::Observation, Some(t_obs)) => tr.box_at(t_obs)?,
            _ => at_emit,
        };
        let l = FrameLabel { actor_id: tr.actor_id, class: tr.class, bbox };
        if inside && seen.is_some() && in_range && !filtered {
            frame.labels.push(l);
        } else {
            frame.ignore.push(l);
        }
    }
    Ok(frame)
}

/// AP per class at both thresholds, plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub vehicle: [Option<f64>; 2],
    pub cyclist: [Option<f64>; 2],
    pub pedestrian: [Option<f64>; 2],
    /// Mean over the defined entries.
    pub mean: Option<f64>,
    /// Scored labels per class.
    pub label_counts: [usize; 3],
}

impl ApTable {
    pub fn get(&self, class: ClassId) -> [Option<f64>; 2] {
        match class {
            ClassId::Vehicle => self.vehicle,
            ClassId::Cyclist => self.cyclist,
            ClassId::Pedestrian => self.pedestrian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: StreamMode,
    pub config: EvalConfig,
    pub frames: usize,
    pub detections: usize,
    /// Detections outside every frame footprint.
    pub outside_footprint: usize,
    pub accumulation_ms: f64,
    /// Labels at detection emission time.
    pub latency: ApTable,
    /// Labels at observation time.
    pub common: ApTable,
}

fn to_option(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

/// Scores detections against frames built in one label mode.
fn score_table(frames: &[ScoredFrame], cfg: &EvalConfig) -> ApTable {
    let mut cells: BTreeMap<(usize, usize), Option<f64>> = BTreeMap::new();
    let mut counts = [0usize; 3];
    for class in ClassId::ALL {
        for (k, crit) in cfg.criteria(class).into_iter().enumerate() {
            let mut flags = Vec::new();
            let mut npos = 0;
            for (frame, dets, margin) in frames {
                let labels: Vec<OrientedBox> =
                    frame.labels.iter().filter(|l| l.class == class).map(|l| l.bbox).collect();
                let ignore: Vec<OrientedBox> =
                    frame.ignore.iter().filter(|l| l.class == class).map(|l| l.bbox).collect();
                let mut cdets: Vec<DetBox> = dets.iter().filter(|d| d.class == class).copied().collect();
                let n_inside = cdets.len();
                cdets.extend(margin.iter().filter(|d| d.class == class));
                npos += labels.len();
                let (out, _) = match_and_score(&cdets, &labels, &ignore, crit);
                for i in ap::score_order(&cdets) {
                    match out[i] {
                        Outcome::TruePositive => flags.push((cdets[i].score, true)),
                        // a miss centered outside the footprint belongs to another frame
                        Outcome::FalsePositive if i < n_inside => flags.push((cdets[i].score, false)),
                        _ => {}
                    }
                }
            }
            counts[class.index()] = npos;
            cells.insert((class.index(), k), to_option(average_precision(&flags, npos)));
        }
    }
    let row = |c: ClassId| [cells[&(c.index(), 0)], cells[&(c.index(), 1)]];
    let defined: Vec<f64> = cells.values().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    ApTable {
        vehicle: row(ClassId::Vehicle),
        cyclist: row(ClassId::Cyclist),
        pedestrian: row(ClassId::Pedestrian),
        mean,
        label_counts: counts,
    }
}

/// A frame with the detections centered in its footprint and those emitted
/// with it but centered outside. Outside detections can match labels but are
/// never false positives.
type ScoredFrame = (LabelFrame, Vec<DetBox>, Vec<DetBox>);

/// Detection batches keyed by emission time, split by footprint.
fn assign_detections(frames: Vec<LabelFrame>, dets: &[DetBox]) -> Result<(Vec<ScoredFrame>, usize)> {
    let mut by_time: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        by_time.insert(f.t_emit.micros(), i);
    }
    let mut out: Vec<ScoredFrame> = frames.into_iter().map(|f| (f, Vec::new(), Vec::new())).collect();
    let mut outside = 0;
    for d in dets {
        let &i = by_time.get(&d.emitted_at.micros()).ok_or_else(|| {
            Error::Mismatch(format!("detection emitted at {} matches no frame of this scenario", d.emitted_at))
        })?;
        if out[i].0.footprint.contains(d.cx, d.cy) {
            out[i].1.push(*d);
        } else {
            out[i].2.push(*d);
            outside += 1;
        }
    }
    Ok((out, outside))
}

/// Full report in both label modes.
pub fn evaluate(labels: &ScenarioLabels, dets: &[DetBox], mode: StreamMode, cfg: &EvalConfig) -> Result<EvalReport> {
    let ranges = labels.frame_ranges(mode);
    let mut tables = Vec::new();
    let mut outside = 0;
    let mut accumulation_us = 0;
    for lm in [LabelMode::Emission, LabelMode::Observation] {
        let frames = ranges
            .iter()
            .map(|r| build_label_frame(labels, r.clone(), lm, cfg))
            .collect::<Result<Vec<_>>>()?;
        accumulation_us = frames.iter().map(|f| f.accumulation_us).max().unwrap_or(0);
        let (assigned, out) = assign_detections(frames, dets)?;
        outside = out;
        tables.push(score_table(&assigned, cfg));
    }
    let common = tables.pop().expect("two tables");
    let latency = tables.pop().expect("two tables");
    Ok(EvalReport {
        scenario: labels.scenario.clone(),
        seed: labels.seed,
        mode,
        config: cfg.clone(),
        frames: ranges.len(),
        detections: dets.len(),
        outside_footprint: outside,
        accumulation_ms: accumulation_us as f64 / 1000.0,
        latency,
        common,
    })
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "   n/a".to_string(), |x| format!("{:6.1}", 100.0 * x))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table, one row per label mode.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} (seed {}), {} mode, {} frames", self.scenario, self.seed, self.mode.name(), self.frames);
        let _ = writeln!(
            s,
            "{:<12} | {:>6} {:>6} | {:>6} {:>6} | {:>6} {:>6} | {:>6}",
            "",
            format!("V@{}", c.vehicle_iou[0]),
            format!("V@{}", c.vehicle_iou[1]),
            format!("C@{}", c.cyclist_iou[0]),
            format!("C@{}", c.cyclist_iou[1]),
            format!("P@{}m", c.pedestrian_dist_m[0]),
            format!("P@{}m", c.pedestrian_dist_m[1]),
            "mean"
        );
        for (name, t) in [("Latency mAP", &self.latency), ("Common mAP", &self.common)] {
            let _ = writeln!(
                s,
                "{:<12} | {} {} | {} {} | {} {} | {}",
                name,
                fmt_ap(t.vehicle[0]),
                fmt_ap(t.vehicle[1]),
                fmt_ap(t.cyclist[0]),
                fmt_ap(t.cyclist[1]),
                fmt_ap(t.pedestrian[0]),
                fmt_ap(t.pedestrian[1]),
                fmt_ap(t.mean)
            );
        }
        let _ = writeln!(s, "accumulation {:.1} ms", self.accumulation_ms);
        s
    }
}

/// End-to-end latency split into data buffering and network time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub accumulation_ms: f64,
    pub inference_p50_ms: f64,
    pub inference_p95_ms: f64,
    pub total_ms: f64,
}

/// Nearest-rank percentile of `values` (`q` in [0, 1]).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Accumulation comes from the simulated clock; inference from wall-clock
/// samples in milliseconds.
pub fn latency_breakdown(labels: &ScenarioLabels, mode: StreamMode, inference_ms: &[f64]) -> LatencyBreakdown {
    let accumulation_ms = labels
        .frame_ranges(mode)
        .iter()
        .map(|r| (labels.packets[r.end - 1].t_end.micros() - labels.packets[r.start].t_start.micros()) as f64 / 1000.0)
        .fold(0.0, f64::max);
    let p50 = percentile(inference_ms, 0.5);
    LatencyBreakdown {
        accumulation_ms,
        inference_p50_ms: p50,
        inference_p95_ms: percentile(inference_ms, 0.95),
        total_ms: accumulation_ms + p50,
    }
}

/// A perfect detector with no inference time: every scorable actor is reported
/// at its observation-time box, emitted when the frame completes.
pub fn oracle_detections(labels: &ScenarioLabels, mode: StreamMode, cfg: &EvalConfig) -> Result<Vec<DetBox>> {
    let mut out = Vec::new();
    for r in labels.frame_ranges(mode) {
        let f = build_label_frame(labels, r, LabelMode::Observation, cfg)?;
        for l in &f.labels {
            let b = l.bbox;
            let extent = l.class.has_extent();
            out.push(DetBox {
                class: l.class,
                cx: b.cx,
                cy: b.cy,
                length: extent.then_some(b.length),
                width: extent.then_some(b.width),
                heading: extent.then_some(b.heading),
                score: 1.0,
                emitted_at: f.t_emit,
            });
        }
    }
    Ok(out)
}
