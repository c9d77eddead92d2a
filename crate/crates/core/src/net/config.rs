use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::error::{Error, Result};

/// Header output channels: vehicle and cyclist get
/// `[logit, dx, dy, log w, log l, theta1, theta2]`, pedestrians `[logit, dx, dy]`.
pub const HEADER_CHANNELS: usize = 17;
pub const VEHICLE_OFFSET: usize = 0;
pub const PEDESTRIAN_OFFSET: usize = 7;
pub const CYCLIST_OFFSET: usize = 10;

/// Number of pool-by-2 stages between the input grid and the coarsest block.
pub const SCALES: usize = 4;
/// Scale of the fused anchor grid (0.8 m at the default 0.2 m input).
pub const FUSED_SCALE: u32 = 2;

/// Architecture and inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub grid: GridSpec,
    pub lidar_layers: [usize; SCALES],
    pub lidar_channels: [usize; SCALES],
    pub map_layers: [usize; SCALES],
    pub map_channels: [usize; SCALES],
    pub fusion_layers: usize,
    pub fusion_channels: usize,
    pub header_channels: usize,
    /// Region halo and alignment stride, in input cells.
    pub halo: usize,
    pub stride: usize,
    /// Channels per GroupNorm group.
    pub group_size: usize,
    pub gn_eps: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub nms_ped_dist: f64,
}

impl NetConfig {
    /// Full-size architecture on a 144 m grid.
    pub fn full() -> Self {
        NetConfig {
            grid: GridSpec::default(),
            lidar_layers: [2, 2, 3, 6],
            lidar_channels: [24, 64, 128, 256],
            map_layers: [2, 2, 3, 3],
            map_channels: [16, 32, 64, 128],
            fusion_layers: 4,
            fusion_channels: 256,
            header_channels: 256,
            halo: 8,
            stride: 8,
            group_size: 8,
            gn_eps: 1e-5,
            score_threshold: 0.1,
            nms_iou: 0.3,
            nms_ped_dist: 0.5,
        }
    }

    /// Same topology, shrunk to train on a CPU in minutes: 96 x 96 cells at
    /// 0.4 m and one layer per block.
    pub fn toy() -> Self {
        NetConfig {
            grid: GridSpec::centered(96, 0.4, -0.5, 2.5, 0.5),
            lidar_layers: [1, 1, 1, 1],
            lidar_channels: [8, 16, 16, 16],
            map_layers: [1, 1, 1, 1],
            map_channels: [8, 8, 8, 8],
            fusion_layers: 1,
            fusion_channels: 32,
            header_channels: 32,
            ..Self::full()
        }
    }

    /// Very small grid used by gradient and equivalence checks.
    pub fn tiny(cells: usize) -> Self {
        NetConfig {
            grid: GridSpec::centered(cells, 0.4, -0.5, 2.5, 1.0),
            lidar_channels: [8, 8, 8, 8],
            map_channels: [8, 8, 8, 8],
            fusion_channels: 8,
            header_channels: 8,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "toy" => Some(Self::toy()),
            "tiny" => Some(Self::tiny(32)),
            _ => None,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.grid.z_bins()
    }

    pub fn scale_spec(&self, s: u32) -> GridSpec {
        self.grid.downscaled(s)
    }

    pub fn groups(&self, channels: usize) -> usize {
        channels / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.resolution > 0.0) || g.z_bins() == 0 {
            return Err(Error::Config("grid needs positive resolution and at least one height bin".into()));
        }
        let align = 1usize << (SCALES - 1);
        if g.width % align != 0 || g.height % align != 0 {
            return Err(Error::Config(format!("grid dims must be multiples of {align}")));
        }
        if self.stride % align != 0 || self.halo % align != 0 {
            return Err(Error::Config(format!("stride and halo must be multiples of {align}")));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        let all = self
            .lidar_channels
            .iter()
            .chain(&self.map_channels)
            .chain([&self.fusion_channels]);
        for &c in all {
            if c == 0 || c % self.group_size != 0 {
                return Err(Error::Config(format!("channel count {c} not divisible into groups of {}", self.group_size)));
            }
        }
        if self.lidar_layers.iter().chain(&self.map_layers).any(|&n| n == 0) || self.fusion_layers == 0 {
            return Err(Error::Config("every block needs at least one layer".into()));
        }
        if self.header_channels == 0 {
            return Err(Error::Config("header needs hidden channels".into()));
        }
        Ok(())
    }
}
