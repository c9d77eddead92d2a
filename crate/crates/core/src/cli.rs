//! Run configuration and the five commands behind the `strobe` binary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalReport, LatencyBreakdown, ScenarioLabels, StreamMode};
use crate::io::{self, Checkpoint, DetectionHeader, PacketFile};
use crate::net::{Detector, Flags, NetConfig, NetworkWeights};
use crate::sim::{self, generate_scenario, ScenarioConfig};
use crate::train::{TrainConfig, Trainer};

/// A library scenario by name or a full inline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Named(String),
    Inline(Box<ScenarioConfig>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub packets: PathBuf,
    pub labels: PathBuf,
    pub detections: PathBuf,
    pub timings: PathBuf,
    pub report: PathBuf,
    pub report_text: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub bench: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        let p = |s: &str| PathBuf::from("out").join(s);
        OutputPaths {
            packets: p("packets.strbp"),
            labels: p("labels.json"),
            detections: p("detections.jsonl"),
            timings: p("timings.csv"),
            report: p("report.json"),
            report_text: p("report.txt"),
            checkpoint: p("weights.strbw"),
            loss_csv: p("loss.csv"),
            bench: p("bench.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Network preset: `full`, `toy` or `tiny`.
    pub network: String,
    pub scenario: ScenarioRef,
    pub mode: StreamMode,
    pub no_memory: bool,
    pub no_map: bool,
    /// Checkpoint to load; `None` initializes weights from `seed`.
    pub weights: Option<PathBuf>,
    /// Continue training from `outputs.checkpoint` when it exists.
    pub resume: bool,
    pub seed: u64,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub outputs: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: "toy".into(),
            scenario: ScenarioRef::Named("occlusion_alley".into()),
            mode: StreamMode::Packet,
            no_memory: false,
            no_map: false,
            weights: None,
            resume: false,
            seed: 0,
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            outputs: OutputPaths::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<StreamMode>,
    pub no_memory: bool,
    pub no_map: bool,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = ov.mode {
            cfg.mode = m;
        }
        cfg.no_memory |= ov.no_memory;
        cfg.no_map |= ov.no_map;
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net()?.validate()?;
        self.train.validate()?;
        self.scenario_config()?;
        for (k, v) in [
            ("vehicle_iou", self.eval.vehicle_iou),
            ("cyclist_iou", self.eval.cyclist_iou),
            ("pedestrian_dist_m", self.eval.pedestrian_dist_m),
        ] {
            if v.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(Error::Config(format!("eval.{k} thresholds must be positive, got {v:?}")));
            }
        }
        if !(self.eval.range_cap_m > 0.0) {
            return Err(Error::Config("eval.range_cap_m must be positive".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> Result<NetConfig> {
        NetConfig::preset(&self.network)
            .ok_or_else(|| Error::Config(format!("unknown network preset `{}` (full, toy, tiny)", self.network)))
    }

    pub fn flags(&self) -> Flags {
        Flags { no_memory: self.no_memory, no_map: self.no_map }
    }

    /// Scenario with the run seed applied.
    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.scenario {
            ScenarioRef::Named(n) => sim::library::scenario(n, self.seed).ok_or_else(|| {
                Error::Config(format!("unknown scenario `{n}` (one of {})", sim::library::SCENARIOS.join(", ")))
            })?,
            ScenarioRef::Inline(c) => (**c).clone(),
        };
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_weights(&self, net: &NetConfig) -> Result<NetworkWeights> {
        match &self.weights {
            Some(p) => Ok(Checkpoint::load(p, net)?.weights),
            None => Ok(NetworkWeights::init(net, self.seed)),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes)?;
    Ok(w.flush()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub packets: usize,
    pub actors: usize,
    pub points: usize,
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    let scenario = cfg.scenario_config()?;
    let (sim, frames) = generate_scenario(scenario.clone())?;
    let labels = ScenarioLabels::new(&sim, &frames);
    let packets: Vec<_> = frames.into_iter().map(|f| f.packet).collect();
    let summary = SimulateSummary {
        packets: packets.len(),
        actors: sim.tracks().len(),
        points: packets.iter().map(|p| p.points.len()).sum(),
    };
    write_file(&cfg.outputs.packets, &PacketFile { scenario, packets }.to_bytes()?)?;
    write_file(&cfg.outputs.labels, serde_json::to_string(&labels)?.as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSummary {
    pub batches: usize,
    pub detections: usize,
    pub inference_ms: Vec<f64>,
}

pub fn infer(cfg: &RunConfig) -> Result<InferSummary> {
    let net = cfg.net()?;
    let file = PacketFile::read(&cfg.outputs.packets)?;
    let detector = Detector::new(net.clone(), cfg.load_weights(&net)?, cfg.flags())?;
    let pps = file.scenario.sensor.packets_per_sweep as usize;
    let out = detector.process_stream(&file.packets, &file.scenario.map, cfg.mode, pps)?;
    let header = DetectionHeader {
        scenario: file.scenario.name.clone(),
        seed: file.seed(),
        mode: cfg.mode,
        no_memory: cfg.no_memory,
        no_map: cfg.no_map,
        batches: out.inference_ms.len(),
    };
    let mut w = create(&cfg.outputs.detections)?;
    io::write_detections(&mut w, &header, &out.detections)?;
    w.flush()?;
    let mut t = create(&cfg.outputs.timings)?;
    writeln!(t, "pass,inference_ms")?;
    for (i, ms) in out.inference_ms.iter().enumerate() {
        writeln!(t, "{i},{ms:.4}")?;
    }
    t.flush()?;
    Ok(InferSummary { batches: out.inference_ms.len(), detections: out.detections.len(), inference_ms: out.inference_ms })
}

pub fn train(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<Trainer> {
    let net = cfg.net()?;
    let scenario = cfg.scenario_config()?;
    let (sim, frames) = generate_scenario(scenario)?;
    let ck_path = &cfg.outputs.checkpoint;
    let mut trainer = if cfg.resume && ck_path.exists() {
        let ck = Checkpoint::load(ck_path, &net)?;
        if ck.step > cfg.train.steps {
            return Err(Error::Config(format!(
                "checkpoint {} is at step {}, past the configured {} steps",
                ck_path.display(),
                ck.step,
                cfg.train.steps
            )));
        }
        let mut t = Trainer::new(net.clone(), cfg.train.clone(), ck.weights)?;
        t.velocity = ck.velocity.ok_or_else(|| {
            Error::Config(format!("checkpoint {} has no optimizer state to resume from", ck_path.display()))
        })?;
        t.step = ck.step;
        log(&format!("resuming from step {}", t.step));
        t
    } else {
        Trainer::new(net.clone(), cfg.train.clone(), cfg.load_weights(&net)?)?
    };
    trainer.flags = cfg.flags();
    log(&format!(
        "sequence layout: {} packets = {} warm-up + {} BPTT",
        cfg.train.sequence_len, cfg.train.warmup, cfg.train.window
    ));
    let resumed = trainer.step > 0;
    let mut csv: Box<dyn Write> = if resumed {
        Box::new(fs::OpenOptions::new().append(true).create(true).open(&cfg.outputs.loss_csv)?)
    } else {
        Box::new(create(&cfg.outputs.loss_csv)?)
    };
    trainer.train(&frames, sim.map(), Some(csv.as_mut()), |t| {
        log(&format!("checkpoint at step {}", t.step));
        let ck = Checkpoint { step: t.step, weights: t.weights.clone(), velocity: Some(t.velocity.clone()) };
        write_file(ck_path, &ck.to_bytes())
    })?;
    csv.flush()?;
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub latency: Option<LatencyBreakdown>,
}

fn read_timings(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad timing row `{l}`")))
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvalOutput> {
    let labels = io::read_labels(&cfg.outputs.labels)?;
    let (header, dets) = io::read_detections(BufReader::new(File::open(&cfg.outputs.detections)?))?;
    if header.scenario != labels.scenario || header.seed != labels.seed {
        return Err(Error::Mismatch(format!(
            "detections are for {} (seed {}) but labels are for {} (seed {})",
            header.scenario, header.seed, labels.scenario, labels.seed
        )));
    }
    let report = eval::evaluate(&labels, &dets, header.mode, &cfg.eval)?;
    let latency = match cfg.outputs.timings.exists() {
        true => Some(eval::latency_breakdown(&labels, header.mode, &read_timings(&cfg.outputs.timings)?)),
        false => None,
    };
    let out = EvalOutput { report, latency };
    write_file(&cfg.outputs.report, serde_json::to_string_pretty(&out.report)?.as_bytes())?;
    write_file(&cfg.outputs.report_text, out.report.to_text().as_bytes())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub network: String,
    pub scenario: String,
    pub packet: LatencyBreakdown,
    pub sweep: LatencyBreakdown,
    /// Median per-sweep over median per-packet inference time.
    pub sweep_over_packet: f64,
}

pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let net = cfg.net()?;
    let scenario = cfg.scenario_config()?;
    let (sim, frames) = generate_scenario(scenario)?;
    let labels = ScenarioLabels::new(&sim, &frames);
    let packets: Vec<_> = frames.into_iter().map(|f| f.packet).collect();
    let detector = Detector::new(net.clone(), cfg.load_weights(&net)?, cfg.flags())?;
    let pps = sim.config().sensor.packets_per_sweep as usize;
    let mut rows = Vec::new();
    for mode in [StreamMode::Packet, StreamMode::Sweep] {
        let out = detector.process_stream(&packets, sim.map(), mode, pps)?;
        rows.push(eval::latency_breakdown(&labels, mode, &out.inference_ms));
    }
    let sweep = rows.pop().expect("two modes");
    let packet = rows.pop().expect("two modes");
    let report = BenchReport {
        network: cfg.network.clone(),
        scenario: labels.scenario.clone(),
        sweep_over_packet: sweep.inference_p50_ms / packet.inference_p50_ms,
        packet,
        sweep,
    };
    write_file(&cfg.outputs.bench, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let row = |name: &str, b: &LatencyBreakdown| {
            format!(
                "{name:<7} accumulation {:6.1} ms | inference p50 {:8.2} ms p95 {:8.2} ms | total {:8.2} ms\n",
                b.accumulation_ms, b.inference_p50_ms, b.inference_p95_ms, b.total_ms
            )
        };
        format!(
            "{}{}sweep/packet inference ratio {:.2}\n",
            row("packet", &self.packet),
            row("sweep", &self.sweep),
            self.sweep_over_packet
        )
    }
}
