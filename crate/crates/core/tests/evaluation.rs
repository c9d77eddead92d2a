mod common;

use strobe_core::eval::{
    build_label_frame, evaluate, latency_breakdown, match_and_score, oracle_detections, percentile, Criterion,
    EvalConfig, LabelMode, Outcome, PacketMeta, ScenarioLabels, StreamMode,
};
use strobe_core::geometry::{rotated_iou, ClassId, DetBox, LabelTrack, OrientedBox, Pose2, Timestamp, TrackState};
use strobe_core::sim::{generate_scenario, library, ActorHits};

const MS: u64 = 1000;

fn track(id: u32, x: f64, vx: f64, t0: u64, t1: u64) -> LabelTrack {
    let state = |t: u64| TrackState {
        t: Timestamp::from_micros(t),
        pose: Pose2::new(x + vx * (t - t0) as f64 * 1e-6, 5.0, 0.0),
        vx,
        vy: 0.0,
        yaw_rate: 0.0,
    };
    LabelTrack { actor_id: id, class: ClassId::Vehicle, length: 4.8, width: 2.0, states: vec![state(t0), state(t1)] }
}

/// Ten 36-degree packets of one sweep; actors listed per packet are hit at
/// the packet's midpoint.
fn synthetic(tracks: Vec<LabelTrack>, hits: &[(usize, u32)]) -> ScenarioLabels {
    let packets = (0..10)
        .map(|k| PacketMeta {
            index: k as u64,
            t_start: Timestamp::from_micros(k as u64 * 10 * MS),
            t_end: Timestamp::from_micros((k as u64 + 1) * 10 * MS),
            ego_pose: Pose2::IDENTITY,
            azimuth_start: k as f64 * 36f64.to_radians(),
            azimuth_span: 36f64.to_radians(),
            hits: hits
                .iter()
                .filter(|h| h.0 == k)
                .map(|&(_, id)| {
                    let t = Timestamp::from_micros(k as u64 * 10 * MS + 5 * MS);
                    ActorHits { actor_id: id, points: 10, t_first: t, t_last: t }
                })
                .collect(),
        })
        .collect();
    ScenarioLabels { scenario: "synthetic".into(), seed: 0, packets_per_sweep: 10, tracks, packets }
}

#[test]
fn stationary_actor_same_box_in_both_modes() {
    let labels = synthetic(vec![track(1, 10.0, 0.0, 0, 200 * MS)], &[(0, 1)]);
    let cfg = EvalConfig::default();
    let a = build_label_frame(&labels, 0..10, LabelMode::Emission, &cfg).unwrap();
    let b = build_label_frame(&labels, 0..10, LabelMode::Observation, &cfg).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.labels.len(), 1);
}

#[test]
fn moving_actor_leads_by_velocity_times_lag() {
    let labels = synthetic(vec![track(1, 10.0, 10.0, 0, 200 * MS)], &[(0, 1)]);
    let cfg = EvalConfig::default();
    let emit = build_label_frame(&labels, 0..10, LabelMode::Emission, &cfg).unwrap();
    let obs = build_label_frame(&labels, 0..10, LabelMode::Observation, &cfg).unwrap();
    // observed at 5 ms, emitted at 100 ms
    let lead = emit.labels[0].bbox.cx - obs.labels[0].bbox.cx;
    assert!((lead - 0.95).abs() < 1e-9, "{lead}");
}

#[test]
fn despawned_and_unseen_actors() {
    let labels = synthetic(vec![track(1, 10.0, 0.0, 0, 50 * MS), track(2, 11.0, 0.0, 0, 200 * MS)], &[(0, 1)]);
    let f = build_label_frame(&labels, 0..10, LabelMode::Emission, &EvalConfig::default()).unwrap();
    assert!(f.labels.is_empty(), "actor 1 is gone at 100 ms and actor 2 was never seen");
    assert_eq!(f.ignore.len(), 1);
    assert_eq!(f.ignore[0].actor_id, 2);
}

#[test]
fn packet_frames_only_cover_their_wedge() {
    // actor at azimuth ~26.6 degrees lies in packet 0's sector
    let labels = synthetic(vec![track(1, 10.0, 0.0, 0, 200 * MS)], &[(0, 1)]);
    let cfg = EvalConfig::default();
    assert_eq!(build_label_frame(&labels, 0..1, LabelMode::Emission, &cfg).unwrap().labels.len(), 1);
    let later = build_label_frame(&labels, 5..6, LabelMode::Emission, &cfg).unwrap();
    assert!(later.labels.is_empty() && later.ignore.is_empty());
}

fn det(b: OrientedBox, score: f64) -> DetBox {
    DetBox {
        class: ClassId::Vehicle,
        cx: b.cx,
        cy: b.cy,
        length: Some(b.length),
        width: Some(b.width),
        heading: Some(b.heading),
        score,
        emitted_at: Timestamp::ZERO,
    }
}

#[test]
fn matching_examples() {
    let l = OrientedBox::new(0.0, 0.0, 4.8, 2.0, 0.0);
    let (out, matched) = match_and_score(&[det(l, 0.9), det(l, 0.8)], &[l], &[], Criterion::Iou(0.7));
    assert_eq!(out, vec![Outcome::TruePositive, Outcome::FalsePositive]);
    assert_eq!(matched, 1);

    let behind = OrientedBox::new(-1.0, 0.0, 4.8, 2.0, 0.0);
    let iou = rotated_iou(&behind, &l);
    assert!((iou - 7.6 / 11.6).abs() < 1e-12);
    for (t, want) in [(0.5, Outcome::TruePositive), (0.7, Outcome::FalsePositive)] {
        let (out, _) = match_and_score(&[det(behind, 0.9)], &[l], &[], Criterion::Iou(t));
        assert_eq!(out[0], want, "threshold {t}");
    }
}

#[test]
fn overtake_oracle_separates_modes() {
    let (sim, frames) = generate_scenario(library::scenario("fast_overtake", 0).unwrap()).unwrap();
    let labels = ScenarioLabels::new(&sim, &frames);
    let cfg = EvalConfig::default();
    let sweep = evaluate(&labels, &oracle_detections(&labels, StreamMode::Sweep, &cfg).unwrap(), StreamMode::Sweep, &cfg)
        .unwrap();
    let packet =
        evaluate(&labels, &oracle_detections(&labels, StreamMode::Packet, &cfg).unwrap(), StreamMode::Packet, &cfg)
            .unwrap();
    let (lat, com) = (sweep.latency.vehicle[1].unwrap(), sweep.common.vehicle[1].unwrap());
    assert!(lat < com, "{lat} vs {com}");
    assert!(packet.latency.vehicle[1].unwrap() > lat);
    assert!(sweep.latency.cyclist[0].is_none(), "no cyclists: undefined AP");
    assert_eq!(sweep.latency.mean, Some(0.5 * (1.0 + lat)));
}

#[test]
fn report_text_has_both_sections() {
    let (sim, frames) = generate_scenario(library::scenario("stationary_grid", 0).unwrap()).unwrap();
    let labels = ScenarioLabels::new(&sim, &frames);
    let cfg = EvalConfig::default();
    let dets = oracle_detections(&labels, StreamMode::Packet, &cfg).unwrap();
    let r = evaluate(&labels, &dets, StreamMode::Packet, &cfg).unwrap();
    let text = r.to_text();
    assert!(text.contains("Latency mAP") && text.contains("Common mAP"));
    let back: strobe_core::eval::EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.latency.mean, Some(1.0));
}

#[test]
fn detections_from_another_run_are_rejected() {
    let (sim, frames) = generate_scenario(library::scenario("stationary_grid", 0).unwrap()).unwrap();
    let labels = ScenarioLabels::new(&sim, &frames);
    let mut d = det(OrientedBox::new(8.0, 6.5, 4.8, 2.0, 0.0), 0.5);
    d.emitted_at = Timestamp::from_micros(12_345);
    assert!(evaluate(&labels, &[d], StreamMode::Packet, &EvalConfig::default()).is_err());
}

#[test]
fn latency_accounting() {
    let labels = synthetic(vec![], &[]);
    let p = latency_breakdown(&labels, StreamMode::Packet, &[1.0, 2.0, 3.0]);
    let s = latency_breakdown(&labels, StreamMode::Sweep, &[20.0]);
    assert_eq!(p.accumulation_ms, 10.0);
    assert_eq!(s.accumulation_ms, 100.0);
    assert_eq!(p.inference_p50_ms, 2.0);
    assert_eq!(p.total_ms, 12.0);
    assert_eq!(percentile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.95), 5.0);
    assert!(percentile(&[], 0.5).is_nan());
}

#[test]
fn wedge_edges_do_not_double_penalize() {
    // packet 0 spans azimuth [0, 36) degrees; this box is centered just below 0
    let tracks = vec![{
        let mut t = track(1, 10.0, 0.0, 0, 200 * MS);
        for s in &mut t.states {
            s.pose = Pose2::new(10.0, -0.3, 0.0);
        }
        t
    }];
    let labels = synthetic(tracks, &[(0, 1), (9, 1)]);
    let cfg = EvalConfig::default();
    let f = build_label_frame(&labels, 0..1, LabelMode::Emission, &cfg).unwrap();
    assert!(f.labels.is_empty());
    assert_eq!(f.ignore.len(), 1, "straddling actor is don't-care in packet 0");

    // a detection on it emitted with packet 0 is neither TP nor FP
    let mut d = det(OrientedBox::new(10.0, 0.1, 4.8, 2.0, 0.0), 0.9);
    d.emitted_at = Timestamp::from_micros(10 * MS);
    let r = evaluate(&labels, &[d], StreamMode::Packet, &cfg).unwrap();
    assert_eq!(r.latency.label_counts[0], 1, "scored once, in packet 9");
    assert_eq!(r.latency.vehicle[0], Some(0.0), "missed in packet 9, no FP in packet 0");

    // the same detection emitted with packet 9, centered outside that wedge, still matches
    d.emitted_at = Timestamp::from_micros(100 * MS);
    let r = evaluate(&labels, &[d], StreamMode::Packet, &cfg).unwrap();
    assert_eq!(r.outside_footprint, 1);
    assert_eq!(r.latency.vehicle[0], Some(1.0));
}

#[test]
fn ap_matches_brute_force_enumeration() {
    assert_eq!(common::ap_mismatches(1000, 21), 0);
    // the worked example: 0.5 * 1 + 0.5 * 2/3
    let flags = [(0.9, true), (0.8, false), (0.7, true)];
    assert_eq!(common::brute_force_ap(&flags, 2), 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
}
