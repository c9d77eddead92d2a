//! Canned scenarios used by tests, training and the acceptance suite.

use crate::geometry::{ClassId, Pose2};

use super::config::{ActorSpec, EgoSpec, MapSpec, ScenarioConfig, SensorSpec};

pub const SCENARIOS: [&str; 5] =
    ["stationary_grid", "crossing_pedestrians", "fast_overtake", "occlusion_alley", "empty"];

pub fn scenario(name: &str, seed: u64) -> Option<ScenarioConfig> {
    let cfg = match name {
        "stationary_grid" => stationary_grid(seed),
        "crossing_pedestrians" => crossing_pedestrians(seed),
        "fast_overtake" => fast_overtake(seed),
        "occlusion_alley" => occlusion_alley(seed),
        "empty" => empty(seed),
        _ => return None,
    };
    Some(cfg)
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn straight_road() -> MapSpec {
    MapSpec { roads: vec![rect(-80.0, -5.0, 80.0, 5.0)], crosswalks: vec![rect(3.0, -5.0, 6.0, 5.0)] }
}

fn base(name: &str, seed: u64, duration_s: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        seed,
        duration_s,
        ego: EgoSpec::default(),
        actors: Vec::new(),
        map: straight_road(),
        sensor: SensorSpec::default(),
    }
}

/// Parked vehicles, a pedestrian and a cyclist around a stationary ego.
pub fn stationary_grid(seed: u64) -> ScenarioConfig {
    let mut cfg = base("stationary_grid", seed, 1.0);
    for &(x, y, yaw) in &[
        (8.0, 6.5, 0.0),
        (-8.0, 6.5, 0.0),
        (8.0, -6.5, 0.0),
        (-8.0, -6.5, 3.1),
        (0.5, 9.0, 0.3),
        (-1.0, -9.5, -0.4),
    ] {
        cfg.actors.push(ActorSpec::parked(ClassId::Vehicle, x, y, yaw));
    }
    cfg.actors.push(ActorSpec::parked(ClassId::Pedestrian, 4.5, 3.0, 0.0));
    cfg.actors.push(ActorSpec::parked(ClassId::Cyclist, -4.0, -3.0, 1.2));
    cfg
}

pub fn crossing_pedestrians(seed: u64) -> ScenarioConfig {
    let mut cfg = base("crossing_pedestrians", seed, 2.0);
    for &(x, y, vy) in &[(4.0, -6.0, 1.4), (5.0, 6.0, -1.3), (-5.0, -7.0, 1.5), (-6.5, 5.0, -1.2)] {
        cfg.actors.push(ActorSpec::moving(ClassId::Pedestrian, x, y, 0.0, vy));
    }
    cfg.actors.push(ActorSpec::moving(ClassId::Cyclist, -10.0, 3.0, 5.0, 0.0));
    cfg.actors.push(ActorSpec::parked(ClassId::Vehicle, 9.0, -7.0, 0.0));
    cfg
}

/// A vehicle passes a slower ego at 10 m/s and stays inside the first sector.
pub fn fast_overtake(seed: u64) -> ScenarioConfig {
    let mut cfg = base("fast_overtake", seed, 2.0);
    cfg.ego = EgoSpec { start: Pose2::IDENTITY, waypoints: vec![[200.0, 0.0]], speed: 5.0 };
    cfg.actors.push(ActorSpec::moving(ClassId::Vehicle, 12.0, 4.0, 10.0, 0.0));
    cfg
}

/// Two rows of parked vehicles; trucks drive between them and the sensor,
/// hiding them for several sweeps at a time.
pub fn occlusion_alley(seed: u64) -> ScenarioConfig {
    let mut cfg = base("occlusion_alley", seed, 8.0);
    cfg.map = MapSpec {
        roads: vec![rect(-80.0, -5.5, 80.0, 5.5)],
        crosswalks: vec![rect(-1.5, -5.5, 1.5, 5.5)],
    };
    for &x in &[-8.5, -2.5, 3.5, 9.5] {
        cfg.actors.push(ActorSpec::parked(ClassId::Vehicle, x, 7.5, 0.0));
    }
    for &x in &[-6.0, 0.0, 6.0] {
        cfg.actors.push(ActorSpec::parked(ClassId::Vehicle, x, -7.5, std::f64::consts::PI));
    }
    let mut truck = ActorSpec::moving(ClassId::Vehicle, -16.0, 3.2, 4.0, 0.0);
    truck.length = 7.0;
    truck.width = 2.4;
    cfg.actors.push(truck.clone());
    let mut back = ActorSpec::moving(ClassId::Vehicle, 16.0, -3.2, -4.0, 0.0);
    back.length = 7.0;
    back.width = 2.4;
    back.spawn_s = 2.0;
    cfg.actors.push(back);
    cfg
}

pub fn empty(seed: u64) -> ScenarioConfig {
    base("empty", seed, 1.0)
}
