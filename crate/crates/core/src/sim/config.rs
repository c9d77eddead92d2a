use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassId, Pose2};

fn default_name() -> String {
    "custom".to_string()
}

/// Full description of a simulated scenario. The seed determines every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub ego: EgoSpec,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    #[serde(default)]
    pub map: MapSpec,
    #[serde(default)]
    pub sensor: SensorSpec,
}

/// Ego drives from `start` through `waypoints` at constant `speed`, then stops.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    #[serde(default)]
    pub start: Pose2,
    #[serde(default)]
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default)]
    pub speed: f64,
}

/// Velocity change applied at `at_s` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub at_s: f64,
    pub vx: f64,
    pub vy: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub class: ClassId,
    pub length: f64,
    pub width: f64,
    /// Pose at spawn time.
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub yaw_rate: f64,
    #[serde(default)]
    pub spawn_s: f64,
    #[serde(default)]
    pub despawn_s: Option<f64>,
    #[serde(default)]
    pub segments: Vec<SegmentSpec>,
}

impl ActorSpec {
    pub fn parked(class: ClassId, x: f64, y: f64, yaw: f64) -> Self {
        let (length, width) = default_dims(class);
        ActorSpec {
            class,
            length,
            width,
            x,
            y,
            yaw,
            vx: 0.0,
            vy: 0.0,
            yaw_rate: 0.0,
            spawn_s: 0.0,
            despawn_s: None,
            segments: Vec::new(),
        }
    }

    pub fn moving(class: ClassId, x: f64, y: f64, vx: f64, vy: f64) -> Self {
        let yaw = if vx == 0.0 && vy == 0.0 { 0.0 } else { vy.atan2(vx) };
        ActorSpec { vx, vy, ..ActorSpec::parked(class, x, y, yaw) }
    }
}

pub fn default_dims(class: ClassId) -> (f64, f64) {
    match class {
        ClassId::Vehicle => (4.8, 2.0),
        ClassId::Pedestrian => (0.6, 0.6),
        ClassId::Cyclist => (1.8, 0.6),
    }
}

pub type Polygon = Vec<[f64; 2]>;

/// Synthetic HD map: world-frame road and crosswalk polygons.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    #[serde(default)]
    pub roads: Vec<Polygon>,
    #[serde(default)]
    pub crosswalks: Vec<Polygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    #[serde(default = "SensorSpec::default_spin")]
    pub spin_rate_hz: f64,
    #[serde(default = "SensorSpec::default_packets")]
    pub packets_per_sweep: u32,
    #[serde(default = "SensorSpec::default_elevations")]
    pub elevations_deg: Vec<f64>,
    #[serde(default = "SensorSpec::default_az_step")]
    pub azimuth_step_deg: f64,
    #[serde(default = "SensorSpec::default_range")]
    pub max_range_m: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "SensorSpec::default_mount")]
    pub mount_height_m: f64,
}

impl SensorSpec {
    fn default_spin() -> f64 {
        10.0
    }
    fn default_packets() -> u32 {
        10
    }
    fn default_elevations() -> Vec<f64> {
        // 32 beams, evenly spaced over [-15, +5] degrees
        (0..32).map(|i| -15.0 + 20.0 * i as f64 / 31.0).collect()
    }
    fn default_az_step() -> f64 {
        0.2
    }
    fn default_range() -> f64 {
        70.0
    }
    fn default_mount() -> f64 {
        1.75
    }

    pub fn packet_rate_hz(&self) -> f64 {
        self.spin_rate_hz * self.packets_per_sweep as f64
    }

    /// Angular span of one packet, radians.
    pub fn sector_span(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.packets_per_sweep as f64
    }

    pub fn azimuth_steps_per_packet(&self) -> usize {
        (360.0 / self.packets_per_sweep as f64 / self.azimuth_step_deg).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.packets_per_sweep == 0 {
            return Err(Error::Config("sensor.packets_per_sweep must be positive".into()));
        }
        if (self.packet_rate_hz() - 100.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "sensor packet rate must be 100 Hz (spin_rate_hz x packets_per_sweep), got {}",
                self.packet_rate_hz()
            )));
        }
        if self.elevations_deg.is_empty() || self.elevations_deg.iter().any(|e| !(e.abs() < 90.0)) {
            return Err(Error::Config("sensor.elevations_deg must be non-empty, within (-90, 90)".into()));
        }
        if !(self.azimuth_step_deg > 0.0) || self.azimuth_steps_per_packet() == 0 {
            return Err(Error::Config("sensor.azimuth_step_deg must be positive and below the sector span".into()));
        }
        if !(self.max_range_m > 0.0) {
            return Err(Error::Config("sensor.max_range_m must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config("sensor.dropout must lie in [0, 1]".into()));
        }
        if !(self.mount_height_m > 0.0) {
            return Err(Error::Config("sensor.mount_height_m must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            spin_rate_hz: Self::default_spin(),
            packets_per_sweep: Self::default_packets(),
            elevations_deg: Self::default_elevations(),
            azimuth_step_deg: Self::default_az_step(),
            max_range_m: Self::default_range(),
            dropout: 0.0,
            mount_height_m: Self::default_mount(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        if !(self.ego.speed >= 0.0) {
            return Err(Error::Config("ego.speed must be non-negative".into()));
        }
        for (i, a) in self.actors.iter().enumerate() {
            if !(a.length > 0.0 && a.width > 0.0) {
                return Err(Error::Config(format!("actors[{i}]: dimensions must be positive")));
            }
            if !(a.spawn_s >= 0.0) || a.spawn_s >= self.duration_s {
                return Err(Error::Config(format!("actors[{i}]: spawn_s must lie in [0, duration_s)")));
            }
            if let Some(d) = a.despawn_s {
                if !(d > a.spawn_s) {
                    return Err(Error::Config(format!("actors[{i}]: despawn_s must follow spawn_s")));
                }
            }
            let mut last = a.spawn_s;
            for seg in &a.segments {
                if !(seg.at_s > last) {
                    return Err(Error::Config(format!("actors[{i}]: segments must be strictly increasing in time")));
                }
                last = seg.at_s;
            }
            let vals = [a.x, a.y, a.yaw, a.vx, a.vy, a.yaw_rate];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("actors[{i}]: non-finite state")));
            }
        }
        for poly in self.map.roads.iter().chain(&self.map.crosswalks) {
            if poly.len() < 3 {
                return Err(Error::Config("map polygons need at least 3 vertices".into()));
            }
        }
        Ok(())
    }

    pub fn packet_count(&self) -> u64 {
        (self.duration_s * self.sensor.packet_rate_hz()).round() as u64
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
