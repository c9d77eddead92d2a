//! On-disk formats: STRBP packet streams, STRBW weight checkpoints, label
//! sidecars and detection JSON-lines. Binary formats are little-endian and
//! round-trip bitwise.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ScenarioLabels, StreamMode};
use crate::geometry::{DetBox, LidarPoint, Packet, Pose2, Timestamp};
use crate::net::{NetConfig, NetworkWeights};
use crate::sim::ScenarioConfig;
use crate::tensor::Tensor;

pub const PACKET_MAGIC: &[u8; 5] = b"STRBP";
pub const WEIGHTS_MAGIC: &[u8; 5] = b"STRBW";
pub const PACKET_VERSION: u16 = 1;
pub const WEIGHTS_VERSION: u16 = 1;
/// Prefix of optimizer-state entries in a checkpoint.
pub const OPT_PREFIX: &str = "opt.";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("{}: truncated at byte {} (wanted {} more)", self.what, self.pos, n))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn magic(&mut self, magic: &[u8; 5], version: u16) -> Result<()> {
        let m = self.take(5)?;
        if m != magic {
            return Err(Error::Format(format!("{}: bad magic {:?}", self.what, String::from_utf8_lossy(m))));
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::Format(format!("{}: unsupported version {v} (expected {version})", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

/// A packet stream plus the scenario that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketFile {
    pub scenario: ScenarioConfig,
    pub packets: Vec<Packet>,
}

impl PacketFile {
    pub fn seed(&self) -> u64 {
        self.scenario.seed
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let pps = self.scenario.sensor.packets_per_sweep;
        let mut out = Vec::new();
        out.extend_from_slice(PACKET_MAGIC);
        out.extend_from_slice(&PACKET_VERSION.to_le_bytes());
        out.extend_from_slice(&self.scenario.seed.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.scenario)?.as_bytes());
        out.extend_from_slice(&(self.packets.len() as u64).to_le_bytes());
        for p in &self.packets {
            let mut rec = Vec::with_capacity(72 + 16 * p.points.len());
            rec.extend_from_slice(&p.global_index(pps).to_le_bytes());
            rec.extend_from_slice(&p.t_start.micros().to_le_bytes());
            rec.extend_from_slice(&p.t_end.micros().to_le_bytes());
            for v in [p.ego_pose.x, p.ego_pose.y, p.ego_pose.yaw, p.azimuth_start, p.azimuth_span] {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            rec.extend_from_slice(&(p.points.len() as u32).to_le_bytes());
            for q in &p.points {
                let off = q.t.delta_us(p.t_start);
                let off = u32::try_from(off)
                    .map_err(|_| Error::Format(format!("point time {} outside packet starting {}", q.t, p.t_start)))?;
                for v in [q.x, q.y, q.z] {
                    rec.extend_from_slice(&v.to_le_bytes());
                }
                rec.extend_from_slice(&off.to_le_bytes());
            }
            put_bytes(&mut out, &rec);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "packet file");
        r.magic(PACKET_MAGIC, PACKET_VERSION)?;
        let seed = r.u64()?;
        let scenario: ScenarioConfig = serde_json::from_slice(r.bytes()?)?;
        if scenario.seed != seed {
            return Err(Error::Format(format!("header seed {seed} disagrees with scenario seed {}", scenario.seed)));
        }
        let pps = scenario.sensor.packets_per_sweep;
        if pps == 0 {
            return Err(Error::Format("scenario has zero packets per sweep".into()));
        }
        let count = r.u64()?;
        let mut packets = Vec::new();
        for k in 0..count {
            let mut q = Reader::new(r.bytes()?, "packet record");
            let g = q.u64()?;
            let t_start = Timestamp::from_micros(q.u64()?);
            let t_end = Timestamp::from_micros(q.u64()?);
            let ego_pose = Pose2 { x: q.f64()?, y: q.f64()?, yaw: q.f64()? };
            let (azimuth_start, azimuth_span) = (q.f64()?, q.f64()?);
            let n = q.u32()? as usize;
            if q.buf.len() - q.pos != 16 * n {
                return Err(Error::Format(format!(
                    "packet record {k}: {n} points need {} bytes, record has {}",
                    16 * n,
                    q.buf.len() - q.pos
                )));
            }
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                let (x, y, z) = (q.f32()?, q.f32()?, q.f32()?);
                let t = Timestamp::from_micros(t_start.micros() + q.u32()? as u64);
                points.push(LidarPoint { x, y, z, t });
            }
            q.finish()?;
            packets.push(Packet {
                sweep: (g / pps as u64) as u32,
                index: (g % pps as u64) as u32,
                t_start,
                t_end,
                ego_pose,
                azimuth_start,
                azimuth_span,
                points,
            });
        }
        r.finish()?;
        Ok(PacketFile { scenario, packets })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Weights plus optional optimizer state at a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub weights: NetworkWeights,
    /// Momentum buffers keyed like `weights`.
    pub velocity: Option<NetworkWeights>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let velocity = self.velocity.iter().flat_map(|v| v.iter()).map(|(n, t)| (format!("{OPT_PREFIX}{n}"), t));
        let entries: Vec<(String, &Tensor<f32>)> =
            self.weights.iter().map(|(n, t)| (n.to_string(), t)).chain(velocity).collect();
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "weights file");
        r.magic(WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut weights = NetworkWeights::new();
        let mut velocity = NetworkWeights::new();
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Format("weights file: entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("weights file: entry {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n.saturating_mul(4) <= buf.len()).ok_or_else(|| {
                Error::Format(format!("weights file: entry {name} shape {shape:?} exceeds the file"))
            })?;
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::from_vec(shape, data)?;
            match name.strip_prefix(OPT_PREFIX) {
                Some(base) => velocity.insert(base.to_string(), t)?,
                None => weights.insert(name, t)?,
            }
        }
        r.finish()?;
        let velocity = (!velocity.is_empty()).then_some(velocity);
        Ok(Checkpoint { step, weights, velocity })
    }

    /// Loads and checks every tensor against the network schedule.
    pub fn load(path: &Path, net: &NetConfig) -> Result<Self> {
        let ck = Self::from_bytes(&std::fs::read(path)?)?;
        ck.weights.validate(net)?;
        if let Some(v) = &ck.velocity {
            v.validate(net)?;
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

pub fn write_labels(path: &Path, labels: &ScenarioLabels) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_string(labels)?)?)
}

pub fn read_labels(path: &Path) -> Result<ScenarioLabels> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// First line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionHeader {
    pub scenario: String,
    pub seed: u64,
    pub mode: StreamMode,
    pub no_memory: bool,
    pub no_map: bool,
    pub batches: usize,
}

pub fn write_detections(mut w: impl Write, header: &DetectionHeader, dets: &[DetBox]) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    for d in dets {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

pub fn read_detections(r: impl BufRead) -> Result<(DetectionHeader, Vec<DetBox>)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Format("detections file is empty".into()))??;
    let header: DetectionHeader = serde_json::from_str(&first)?;
    let mut dets = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            dets.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, dets))
}
