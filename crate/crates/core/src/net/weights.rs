use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{NetConfig, CYCLIST_OFFSET, HEADER_CHANNELS, PEDESTRIAN_OFFSET, SCALES, VEHICLE_OFFSET};
use crate::bev::MAP_CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Const(f64),
    /// Score logits get `logit(prior)`, everything else zero.
    HeaderBias { prior: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Conv layer as stored: kernel, bias and (optionally) GroupNorm affine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub norm: bool,
}

impl LayerSpec {
    fn new(name: String, cin: usize, cout: usize, k: usize, norm: bool) -> Self {
        LayerSpec { name, cin, cout, k, norm }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn gamma(&self) -> String {
        format!("{}.gn_gamma", self.name)
    }

    pub fn beta(&self) -> String {
        format!("{}.gn_beta", self.name)
    }
}

pub fn lidar_block(cfg: &NetConfig, s: usize) -> Vec<LayerSpec> {
    let c = cfg.lidar_channels[s];
    let cin = if s == 0 { cfg.input_channels() } else { cfg.lidar_channels[s - 1] };
    (0..cfg.lidar_layers[s])
        .map(|i| LayerSpec::new(format!("lidar.b{s}.l{i}"), if i == 0 { cin } else { c }, c, 3, true))
        .collect()
}

/// Two layers: 2c -> 2c, then back down to c.
pub fn memory_block(cfg: &NetConfig, s: usize) -> Vec<LayerSpec> {
    let c = cfg.lidar_channels[s];
    vec![
        LayerSpec::new(format!("lidar.b{s}.mem.l0"), 2 * c, 2 * c, 3, true),
        LayerSpec::new(format!("lidar.b{s}.mem.l1"), 2 * c, c, 3, true),
    ]
}

pub fn map_block(cfg: &NetConfig, s: usize) -> Vec<LayerSpec> {
    let c = cfg.map_channels[s];
    let cin = if s == 0 { MAP_CHANNELS } else { cfg.map_channels[s - 1] };
    (0..cfg.map_layers[s])
        .map(|i| LayerSpec::new(format!("map.b{s}.l{i}"), if i == 0 { cin } else { c }, c, 3, true))
        .collect()
}

pub fn fused_channels(cfg: &NetConfig) -> usize {
    cfg.lidar_channels.iter().sum::<usize>() + cfg.map_channels.iter().sum::<usize>()
}

pub fn fusion_block(cfg: &NetConfig) -> Vec<LayerSpec> {
    let c = cfg.fusion_channels;
    (0..cfg.fusion_layers)
        .map(|i| LayerSpec::new(format!("fusion.l{i}"), if i == 0 { fused_channels(cfg) } else { c }, c, 3, true))
        .collect()
}

pub fn header_layers(cfg: &NetConfig) -> [LayerSpec; 2] {
    [
        LayerSpec::new("header.l0".into(), cfg.fusion_channels, cfg.header_channels, 3, false),
        LayerSpec::new("header.l1".into(), cfg.header_channels, HEADER_CHANNELS, 1, false),
    ]
}

pub fn all_layers(cfg: &NetConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    for s in 0..SCALES {
        out.extend(lidar_block(cfg, s));
        out.extend(memory_block(cfg, s));
    }
    for s in 0..SCALES {
        out.extend(map_block(cfg, s));
    }
    out.extend(fusion_block(cfg));
    out.extend(header_layers(cfg));
    out
}

pub const SCORE_PRIOR: f64 = 0.01;

/// Every parameter of the architecture, in file order.
pub fn schedule(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for l in all_layers(cfg) {
        let fan_in = l.cin * l.k * l.k;
        out.push(ParamSpec { name: l.weight(), shape: vec![l.cout, l.cin, l.k, l.k], init: Init::HeUniform { fan_in } });
        let bias_init = if l.name == "header.l1" { Init::HeaderBias { prior: SCORE_PRIOR } } else { Init::Const(0.0) };
        out.push(ParamSpec { name: l.bias(), shape: vec![l.cout], init: bias_init });
        if l.norm {
            out.push(ParamSpec { name: l.gamma(), shape: vec![l.cout], init: Init::Const(1.0) });
            out.push(ParamSpec { name: l.beta(), shape: vec![l.cout], init: Init::Const(0.0) });
        }
    }
    out
}

/// Named parameter tensors. Tensors are shared so binding them to a tape
/// costs nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    entries: Vec<(String, Arc<Tensor<T>>)>,
    index: HashMap<String, usize>,
}

pub type NetworkWeights = Weights<f32>;

impl<T: Scalar> Default for Weights<T> {
    fn default() -> Self {
        Weights { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> Weights<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        for p in schedule(cfg) {
            let t = match p.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&p.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                Init::Const(v) => Tensor::full(&p.shape, T::of(v)),
                Init::HeaderBias { prior } => {
                    let logit = (prior / (1.0 - prior)).ln();
                    Tensor::from_fn(&p.shape, |i| {
                        if i == VEHICLE_OFFSET || i == PEDESTRIAN_OFFSET || i == CYCLIST_OFFSET {
                            T::of(logit)
                        } else {
                            T::zero()
                        }
                    })
                }
            };
            w.insert(p.name, t).expect("schedule names are unique");
        }
        w
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Weights { name, reason: "duplicate entry".into() });
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, Arc::new(t)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Weights { name: name.to_string(), reason: "missing".into() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Weights { name: name.to_string(), reason: "missing".into() })?;
        Ok(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), Arc::new(t.cast()))).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names, shapes and finiteness against the architecture.
    pub fn validate(&self, cfg: &NetConfig) -> Result<()> {
        let sched = schedule(cfg);
        for p in &sched {
            let t = self.get(&p.name)?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Weights {
                    name: p.name.clone(),
                    reason: format!("shape {:?}, architecture wants {:?}", t.shape(), p.shape),
                });
            }
            if !t.all_finite() {
                return Err(Error::Weights { name: p.name.clone(), reason: "non-finite values".into() });
            }
        }
        if let Some((extra, _)) = self.entries.iter().find(|(n, _)| !sched.iter().any(|p| &p.name == n)) {
            return Err(Error::Weights { name: extra.clone(), reason: "not part of the architecture".into() });
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}
