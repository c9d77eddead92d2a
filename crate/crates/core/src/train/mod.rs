//! Target assignment, losses with hard negative mining, and truncated
//! back-propagation through time over packet sequences.

pub mod loss;
pub mod targets;

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, AnchorGrid, Flags, MemoryVars, NetConfig, NetworkWeights, PacketInput, Params, SpatialMemory};
use crate::sim::{Label, MapSpec, SimFrame};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use loss::{classification_loss, mine_hard_negatives, packet_loss, regression_loss, smooth_l1, total_loss};
pub use targets::{assign_targets, TargetMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the classification term.
    pub alpha: f64,
    /// Per-component regression weights.
    pub gamma: [f64; 6],
    /// Smooth-L1 transition point.
    pub beta: f64,
    /// Negatives sampled per class, indexed vehicle, pedestrian, cyclist.
    pub negative_samples: [usize; 3],
    /// Hard negatives kept per class.
    pub hard_negatives: usize,
    pub sequence_len: usize,
    pub warmup: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 2.0,
            gamma: [1.0, 1.0, 1.0, 1.0, 2.0, 2.0],
            beta: 1.0,
            negative_samples: [750, 1500, 1500],
            hard_negatives: 20,
            sequence_len: 50,
            warmup: 40,
            window: 10,
            learning_rate: 0.02,
            momentum: 0.9,
            clip_norm: Some(10.0),
            steps: 200,
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup + self.window != self.sequence_len {
            return Err(Error::Config(format!(
                "warm-up {} + window {} must equal sequence length {}",
                self.warmup, self.window, self.sequence_len
            )));
        }
        if self.window == 0 || self.hard_negatives == 0 || self.negative_samples.contains(&0) {
            return Err(Error::Config("window, hard negative and sample counts must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be >= 0 and momentum in [0, 1)".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised packet: network input plus the labels it is trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedPacket<T> {
    pub input: PacketInput<T>,
    /// World-frame labels of actors seen so far in the sequence.
    pub labels: Vec<Label>,
    /// Actors with returns in this packet.
    pub hit_ids: Vec<u32>,
}

/// Builds inputs and supervision for consecutive frames. Labels are limited
/// to actors observed in `frames` up to and including each packet, which may
/// include actors with no points in the packet itself.
pub fn supervise(cfg: &NetConfig, frames: &[SimFrame], map: Option<&MapSpec>) -> Vec<SupervisedPacket<f32>> {
    let mut seen = BTreeSet::new();
    frames
        .iter()
        .map(|f| {
            seen.extend(f.hits.iter().map(|h| h.actor_id));
            SupervisedPacket {
                input: net::prepare_input(cfg, &f.packet.points, f.packet.ego_pose, map),
                labels: f.labels.iter().filter(|l| seen.contains(&l.actor_id)).copied().collect(),
                hit_ids: f.hits.iter().map(|h| h.actor_id).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnrollStats {
    pub reg: f64,
    pub cls: f64,
    pub total: f64,
    pub positives: usize,
    /// Positives whose actor had no returns in that packet.
    pub zero_point_positives: usize,
}

/// Runs `packets` on `tape` starting from `memory`, summing per-packet losses.
/// The loss is `None` when no packet produced a header pass.
pub fn unrolled_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    memory: MemoryVars,
    packets: &[SupervisedPacket<T>],
    flags: Flags,
    rng: &mut impl Rng,
) -> Result<(Option<Var>, UnrollStats, MemoryVars)> {
    let mut mem = memory;
    let mut total: Option<Var> = None;
    let mut stats = UnrollStats::default();
    for p in packets {
        let (head, next) = net::forward_step(tape, params, net_cfg, &mem, &p.input, flags)?;
        mem = next;
        let Some(head) = head else { continue };
        let anchors = AnchorGrid::new(net_cfg, head.region, p.input.pose);
        let targets = assign_targets(&p.labels, &anchors);
        stats.positives += targets.positive_count();
        stats.zero_point_positives += targets.assigned.iter().filter(|id| !p.hit_ids.contains(id)).count();
        let l = packet_loss(tape.value(head.var), &targets, cfg, rng);
        stats.reg += l.reg;
        stats.cls += l.cls;
        stats.total += l.total;
        let v = tape.fused(T::of(l.total), &[head.var], vec![l.grad])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
    }
    Ok((total, stats, mem))
}

/// Forward-only pass used to warm up memory.
pub fn warm_up<T: Scalar>(
    net_cfg: &NetConfig,
    weights: &net::Weights<T>,
    memory: SpatialMemory<T>,
    inputs: &[&PacketInput<T>],
    flags: Flags,
) -> Result<SpatialMemory<T>> {
    if flags.no_memory {
        return Ok(memory);
    }
    let mut mem = memory;
    for input in inputs {
        let mut tape = Tape::forward_only();
        let params = Params::bind(&mut tape, weights);
        let mv = MemoryVars::constant(&mut tape, &mem);
        let (_, mv) = net::forward_step(&mut tape, &params, net_cfg, &mv, input, flags)?;
        mem = mv.detach(&tape);
    }
    Ok(mem)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// First frame of the sequence within the scenario.
    pub offset: usize,
    pub stats: UnrollStats,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn csv_header() -> &'static str {
        "step,l_reg,l_cls,loss"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.step, self.stats.reg, self.stats.cls, self.stats.total)
    }
}

/// Momentum SGD over sequences drawn from one scenario.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: NetConfig,
    pub cfg: TrainConfig,
    pub weights: NetworkWeights,
    /// Momentum buffers, one per weight.
    pub velocity: NetworkWeights,
    pub step: u64,
    pub flags: Flags,
}

impl Trainer {
    pub fn new(net: NetConfig, cfg: TrainConfig, weights: NetworkWeights) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        weights.validate(&net)?;
        let mut velocity = NetworkWeights::new();
        for (n, t) in weights.iter() {
            velocity.insert(n.to_string(), Tensor::zeros(t.shape()))?;
        }
        Ok(Trainer { net, cfg, weights, velocity, step: 0, flags: Flags::default() })
    }

    /// Seeded start frame of the sequence used at `step`.
    pub fn sequence_offset(&self, step: u64, frame_count: usize) -> Result<usize> {
        if frame_count < self.cfg.sequence_len {
            return Err(Error::Config(format!(
                "scenario has {frame_count} packets, training needs at least {}",
                self.cfg.sequence_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        Ok(rng.gen_range(0..=frame_count - self.cfg.sequence_len))
    }

    fn mining_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0f_4a11);
        rng.set_stream(step);
        rng
    }

    fn map_for<'a>(&self, map: &'a MapSpec) -> Option<&'a MapSpec> {
        if self.flags.no_map {
            None
        } else {
            Some(map)
        }
    }

    /// Loss and gradients of one sequence without touching the weights.
    pub fn sequence_gradients(&self, frames: &[SimFrame], map: &MapSpec, step: u64) -> Result<(UnrollStats, Vec<(String, Tensor<f32>)>)> {
        if frames.len() != self.cfg.sequence_len {
            return Err(Error::Config(format!("sequence has {} packets, expected {}", frames.len(), self.cfg.sequence_len)));
        }
        let packets = supervise(&self.net, frames, self.map_for(map));
        let (warm, window) = packets.split_at(self.cfg.warmup);
        let start = SpatialMemory::zeros(&self.net, frames[0].packet.ego_pose);
        let warm_inputs: Vec<&PacketInput<f32>> = warm.iter().map(|p| &p.input).collect();
        let mem = warm_up(&self.net, &self.weights, start, &warm_inputs, self.flags)?;
        let mut tape = Tape::new();
        let params = Params::bind(&mut tape, &self.weights);
        let mv = MemoryVars::constant(&mut tape, &mem);
        let mut rng = self.mining_rng(step);
        let (loss, stats, _) = unrolled_loss(&mut tape, &params, &self.net, &self.cfg, mv, window, self.flags, &mut rng)?;
        let Some(loss) = loss else { return Ok((stats, Vec::new())) };
        let grads = tape.backward(loss)?;
        let out = params
            .iter()
            .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
            .collect();
        Ok((stats, out))
    }

    /// One optimizer step on the sequence chosen for the current step.
    pub fn train_step(&mut self, scenario: &[SimFrame], map: &MapSpec) -> Result<StepReport> {
        let offset = self.sequence_offset(self.step, scenario.len())?;
        let frames = &scenario[offset..offset + self.cfg.sequence_len];
        let (stats, grads) = self.sequence_gradients(frames, map, self.step)?;
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (lr, mu) = (self.cfg.learning_rate as f32, self.cfg.momentum as f32);
        for (name, g) in &grads {
            let v = self.velocity.get_mut(name)?;
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi * scale as f32;
            }
            let v = self.velocity.get(name)?.clone();
            let w = self.weights.get_mut(name)?;
            for (wi, &vi) in w.data_mut().iter_mut().zip(v.data()) {
                *wi -= lr * vi;
            }
        }
        let report = StepReport { step: self.step, offset, stats, grad_norm: norm };
        self.step += 1;
        Ok(report)
    }

    /// Runs until `cfg.steps`, writing one CSV row per step to `csv` and
    /// calling `checkpoint` every `checkpoint_every` steps and at the end.
    pub fn train(
        &mut self,
        scenario: &[SimFrame],
        map: &MapSpec,
        mut csv: Option<&mut dyn Write>,
        mut checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        if let Some(w) = csv.as_mut() {
            if self.step == 0 {
                writeln!(w, "{}", StepReport::csv_header())?;
            }
        }
        while self.step < self.cfg.steps {
            let r = self.train_step(scenario, map)?;
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", r.csv_row())?;
            }
            reports.push(r);
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                checkpoint(self)?;
            }
        }
        checkpoint(self)?;
        Ok(reports)
    }
}
