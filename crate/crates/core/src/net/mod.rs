//! The streaming detector: regional convolution blocks over LiDAR and map
//! rasters, a multi-scale spatial memory, fusion at 0.8 m and a single-stage
//! header, plus decoding and suppression.

pub mod config;
mod decode;
pub mod reference;
pub mod weights;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::bev::{self, BevGrid, RegionRect, MAP_CHANNELS};
use crate::error::{Error, Result};
use crate::eval::StreamMode;
use crate::geometry::{DetBox, LidarPoint, Packet, Pose2};
use crate::sim::MapSpec;
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};

pub use config::{NetConfig, FUSED_SCALE, HEADER_CHANNELS, SCALES};
pub use decode::{class_offset, decode_boxes, encode_heading, nms, AnchorGrid};
pub use weights::{NetworkWeights, Weights};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub no_memory: bool,
    pub no_map: bool,
}

/// One feature grid per LiDAR block, all aligned to `frame_pose`. Scale `s`
/// has `2^s` times the input cell size and the block's channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMemory<T> {
    pub frame_pose: Pose2,
    pub scales: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> SpatialMemory<T> {
    pub fn zeros(cfg: &NetConfig, frame_pose: Pose2) -> Self {
        let scales = (0..SCALES)
            .map(|s| {
                let spec = cfg.scale_spec(s as u32);
                Arc::new(Tensor::zeros(&[cfg.lidar_channels[s], spec.height, spec.width]))
            })
            .collect();
        SpatialMemory { frame_pose, scales }
    }

    /// Bilinear resampling of every scale into the frame of `pose`.
    pub fn realigned(&self, cfg: &NetConfig, pose: Pose2) -> Self {
        if pose == self.frame_pose {
            return self.clone();
        }
        let scales = self
            .scales
            .iter()
            .enumerate()
            .map(|(s, m)| {
                let a = bev::realign_affine(&cfg.scale_spec(s as u32), &self.frame_pose, &pose);
                Arc::new(ops::bilinear_warp(m, &a))
            })
            .collect();
        SpatialMemory { frame_pose: pose, scales }
    }
}

impl SpatialMemory<f32> {
    pub fn to_grids(&self, cfg: &NetConfig) -> Vec<BevGrid> {
        self.scales
            .iter()
            .enumerate()
            .map(|(s, m)| BevGrid::from_tensor((**m).clone(), cfg.scale_spec(s as u32), self.frame_pose))
            .collect()
    }
}

/// Network inputs for one packet, cut to the haloed region.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketInput<T> {
    pub pose: Pose2,
    /// Stride-aligned region at input resolution; `None` for an empty packet.
    pub region: Option<RegionRect>,
    /// `region` grown by the halo; the extent both backbones run on.
    pub expanded: RegionRect,
    pub lidar: Tensor<T>,
    pub map: Tensor<T>,
}

impl<T: Scalar> PacketInput<T> {
    pub fn cast<U: Scalar>(&self) -> PacketInput<U> {
        PacketInput {
            pose: self.pose,
            region: self.region,
            expanded: self.expanded,
            lidar: self.lidar.cast(),
            map: self.map.cast(),
        }
    }
}

/// Voxelizes points in the frame of `pose` and rasterizes the map, both over
/// the haloed packet region only.
pub fn prepare_input(cfg: &NetConfig, points: &[LidarPoint], pose: Pose2, map: Option<&MapSpec>) -> PacketInput<f32> {
    let spec = &cfg.grid;
    let voxels = bev::packet_voxels(points, pose, spec);
    let cells: Vec<(usize, usize)> = voxels.iter().map(|&(_, iy, ix)| (ix, iy)).collect();
    let region = bev::compute_region(&cells, cfg.halo, cfg.stride, spec.width, spec.height);
    prepare_input_in(cfg, &voxels, region, pose, map)
}

/// As [`prepare_input`] with a caller-chosen region.
pub fn prepare_input_in(
    cfg: &NetConfig,
    voxels: &[(usize, usize, usize)],
    region: Option<RegionRect>,
    pose: Pose2,
    map: Option<&MapSpec>,
) -> PacketInput<f32> {
    let spec = &cfg.grid;
    let expanded = match region {
        Some(r) => r.expanded(cfg.halo, spec.width, spec.height),
        None => RegionRect { x0: 0, y0: 0, x1: 0, y1: 0 },
    };
    let (lidar, map) = if region.is_some() {
        let lidar = bev::voxel_window(voxels, cfg.input_channels(), &expanded);
        let map = match map {
            Some(m) => bev::rasterize_map_window(m, pose, spec, &expanded),
            None => Tensor::zeros(&[MAP_CHANNELS, expanded.height(), expanded.width()]),
        };
        (lidar, map)
    } else {
        (Tensor::zeros(&[cfg.input_channels(), 0, 0]), Tensor::zeros(&[MAP_CHANNELS, 0, 0]))
    };
    PacketInput { pose, region, expanded, lidar, map }
}

/// Parameters bound to a tape by name.
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, weights: &Weights<T>) -> Self {
        let vars = weights
            .names()
            .map(|n| (n.to_string(), tape.param_shared(Arc::clone(weights.get(n).expect("listed name")))))
            .collect();
        Params { vars }
    }

    /// Binds names to existing tape variables, e.g. inputs of a gradient check.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Params { vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Weights { name: name.to_string(), reason: "missing".into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Memory state as tape values.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryVars {
    pub pose: Pose2,
    pub scales: Vec<Var>,
}

impl MemoryVars {
    pub fn constant<T: Scalar>(tape: &mut Tape<T>, mem: &SpatialMemory<T>) -> Self {
        MemoryVars { pose: mem.frame_pose, scales: mem.scales.iter().map(|m| tape.constant_shared(Arc::clone(m))).collect() }
    }

    pub fn detach<T: Scalar>(&self, tape: &Tape<T>) -> SpatialMemory<T> {
        SpatialMemory { frame_pose: self.pose, scales: self.scales.iter().map(|&v| tape.shared(v)).collect() }
    }
}

/// Header activations over the fused-grid region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeaderOut {
    pub var: Var,
    /// Region in fused-grid cells.
    pub region: RegionRect,
}

/// conv -> ReLU -> GroupNorm per layer (GroupNorm only where the layer has it).
pub fn run_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params,
    cfg: &NetConfig,
    layers: &[weights::LayerSpec],
    mut x: Var,
) -> Result<Var> {
    for l in layers {
        let b = params.get(&l.bias())?;
        x = tape.conv2d(x, params.get(&l.weight())?, Some(b), l.k / 2, 1)?;
        x = tape.relu(x);
        if l.norm {
            x = tape.group_norm(x, cfg.groups(l.cout), params.get(&l.gamma())?, params.get(&l.beta())?, cfg.gn_eps)?;
        }
    }
    Ok(x)
}

/// Realigns memory to the packet pose (unless memory is off) and, for a
/// non-empty packet, runs both backbones, the memory update, fusion and the
/// header over the packet region.
pub fn forward_step<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params,
    cfg: &NetConfig,
    memory: &MemoryVars,
    input: &PacketInput<T>,
    flags: Flags,
) -> Result<(Option<HeaderOut>, MemoryVars)> {
    let mut mem = memory.clone();
    if !flags.no_memory && mem.pose != input.pose {
        for (s, v) in mem.scales.iter_mut().enumerate() {
            let a = bev::realign_affine(&cfg.scale_spec(s as u32), &mem.pose, &input.pose);
            *v = tape.warp(*v, a);
        }
        mem.pose = input.pose;
    }
    let Some(r0) = input.region else { return Ok((None, mem)) };
    let e0 = input.expanded;
    if input.lidar.shape() != [cfg.input_channels(), e0.height(), e0.width()] {
        return Err(Error::Shape(format!("lidar input {:?} does not cover region {:?}", input.lidar.shape(), e0)));
    }
    let mut x = tape.constant(input.lidar.clone());
    let mut xm = tape.constant(input.map.clone());
    let mut lidar_feats = Vec::with_capacity(SCALES);
    let mut map_feats = Vec::with_capacity(SCALES);
    for s in 0..SCALES {
        let rs = r0.downscaled(s as u32);
        let es = e0.downscaled(s as u32);
        let (oy, ox) = ((rs.y0 - es.y0) as isize, (rs.x0 - es.x0) as isize);
        let yfull = run_block(tape, params, cfg, &weights::lidar_block(cfg, s), x)?;
        let y = tape.crop(yfull, oy, ox, rs.height(), rs.width());
        let (z, pre_pool) = if flags.no_memory {
            (y, yfull)
        } else {
            let m = mem.scales[s];
            let mc = tape.crop(m, rs.y0 as isize, rs.x0 as isize, rs.height(), rs.width());
            let cat = tape.concat(&[mc, y])?;
            let u = run_block(tape, params, cfg, &weights::memory_block(cfg, s), cat)?;
            let m2 = tape.paste(m, u, rs.y0, rs.x0)?;
            mem.scales[s] = m2;
            (u, tape.crop(m2, es.y0 as isize, es.x0 as isize, es.height(), es.width()))
        };
        lidar_feats.push(z);
        if s + 1 < SCALES {
            x = tape.max_pool2(pre_pool)?;
        }
        if flags.no_map {
            map_feats.push(tape.constant(Tensor::zeros(&[cfg.map_channels[s], rs.height(), rs.width()])));
        } else {
            let mfull = run_block(tape, params, cfg, &weights::map_block(cfg, s), xm)?;
            map_feats.push(tape.crop(mfull, oy, ox, rs.height(), rs.width()));
            if s + 1 < SCALES {
                xm = tape.max_pool2(mfull)?;
            }
        }
    }
    let r2 = r0.downscaled(FUSED_SCALE);
    let mut fused = Vec::with_capacity(2 * SCALES);
    for f in lidar_feats.into_iter().chain(map_feats) {
        fused.push(tape.resize(f, r2.height(), r2.width())?);
    }
    let cat = tape.concat(&fused)?;
    let f = run_block(tape, params, cfg, &weights::fusion_block(cfg), cat)?;
    let [h0, h1] = weights::header_layers(cfg);
    let h = tape.conv2d(f, params.get(&h0.weight())?, Some(params.get(&h0.bias())?), 1, 1)?;
    let h = tape.relu(h);
    let out = tape.conv2d(h, params.get(&h1.weight())?, Some(params.get(&h1.bias())?), 0, 1)?;
    Ok((Some(HeaderOut { var: out, region: r2 }), mem))
}

/// Result of one network pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutput {
    pub detections: Vec<DetBox>,
    /// Input-resolution region, `None` when the packet had no in-grid points.
    pub region: Option<RegionRect>,
    /// Raw header activations over the fused region.
    pub header: Option<Tensor<f32>>,
}

/// Inference-time network with immutable weights.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: NetConfig,
    weights: NetworkWeights,
    pub flags: Flags,
}

impl Detector {
    pub fn new(cfg: NetConfig, weights: NetworkWeights, flags: Flags) -> Result<Self> {
        cfg.validate()?;
        weights.validate(&cfg)?;
        Ok(Detector { cfg, weights, flags })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn fresh_memory(&self, pose: Pose2) -> SpatialMemory<f32> {
        SpatialMemory::zeros(&self.cfg, pose)
    }

    fn map_for<'a>(&self, map: &'a MapSpec) -> Option<&'a MapSpec> {
        if self.flags.no_map {
            None
        } else {
            Some(map)
        }
    }

    /// Runs the network on prepared input, updating `memory` in place.
    pub fn run(&self, memory: &mut SpatialMemory<f32>, input: &PacketInput<f32>, emitted_at: crate::geometry::Timestamp) -> Result<PassOutput> {
        let mut tape = Tape::forward_only();
        let params = Params::bind(&mut tape, &self.weights);
        let mvars = MemoryVars::constant(&mut tape, memory);
        let (head, mvars) = forward_step(&mut tape, &params, &self.cfg, &mvars, input, self.flags)?;
        if !self.flags.no_memory {
            *memory = mvars.detach(&tape);
        }
        let Some(head) = head else {
            return Ok(PassOutput { detections: Vec::new(), region: None, header: None });
        };
        let header = tape.value(head.var).clone();
        let anchors = AnchorGrid::new(&self.cfg, head.region, input.pose);
        let dets = decode_boxes(&header, &anchors, self.cfg.score_threshold, emitted_at);
        let dets = nms(dets, self.cfg.nms_iou, self.cfg.nms_ped_dist);
        Ok(PassOutput { detections: dets, region: input.region, header: Some(header) })
    }

    /// Processes one packet. Detections are in the world frame and stamped
    /// with the packet end time.
    pub fn process_packet(&self, memory: &mut SpatialMemory<f32>, packet: &Packet, map: &MapSpec) -> Result<PassOutput> {
        let input = prepare_input(&self.cfg, &packet.points, packet.ego_pose, self.map_for(map));
        self.run(memory, &input, packet.t_end)
    }

    /// One pass over a whole sweep merged into a single pseudo-packet, with
    /// fresh memory, in the frame of the last packet.
    pub fn process_sweep(&self, packets: &[Packet], map: &MapSpec) -> Result<PassOutput> {
        let last = packets.last().ok_or_else(|| Error::Config("sweep has no packets".into()))?;
        let points: Vec<LidarPoint> = packets.iter().flat_map(|p| p.points.iter().copied()).collect();
        let input = prepare_input(&self.cfg, &points, last.ego_pose, self.map_for(map));
        let mut memory = self.fresh_memory(last.ego_pose);
        self.run(&mut memory, &input, last.t_end)
    }
}

/// Detections and per-pass wall-clock time for a whole packet stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub detections: Vec<DetBox>,
    pub inference_ms: Vec<f64>,
}

impl Detector {
    /// Runs a packet stream in packet mode (memory carried across packets)
    /// or sweep mode (one pass per complete sweep).
    pub fn process_stream(&self, packets: &[Packet], map: &MapSpec, mode: StreamMode, packets_per_sweep: usize) -> Result<StreamOutput> {
        let mut out = StreamOutput { detections: Vec::new(), inference_ms: Vec::new() };
        let Some(first) = packets.first() else { return Ok(out) };
        let mut push = |pass: PassOutput, started: Instant| {
            out.inference_ms.push(started.elapsed().as_secs_f64() * 1e3);
            out.detections.extend(pass.detections);
        };
        match mode {
            StreamMode::Packet => {
                let mut memory = self.fresh_memory(first.ego_pose);
                for p in packets {
                    let t = Instant::now();
                    let pass = self.process_packet(&mut memory, p, map)?;
                    push(pass, t);
                }
            }
            StreamMode::Sweep => {
                if packets_per_sweep == 0 {
                    return Err(Error::Config("packets_per_sweep must be positive".into()));
                }
                for sweep in packets.chunks_exact(packets_per_sweep) {
                    let t = Instant::now();
                    let pass = self.process_sweep(sweep, map)?;
                    push(pass, t);
                }
            }
        }
        Ok(out)
    }
}
