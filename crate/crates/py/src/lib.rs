//! Python bindings: simulate scenarios, run the detector, train, and score.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use strobe_core::eval::{self, EvalConfig, ScenarioLabels, StreamMode};
use strobe_core::geometry::{rotated_iou as iou, ClassId, DetBox, OrientedBox};
use strobe_core::io::Checkpoint;
use strobe_core::net::{self, Flags, NetConfig, NetworkWeights};
use strobe_core::sim::{generate_scenario, library, SimFrame, Simulator};
use strobe_core::train::{TrainConfig, Trainer};

fn py_err(e: strobe_core::Error) -> PyErr {
    match e {
        strobe_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<StreamMode> {
    match mode {
        "packet" => Ok(StreamMode::Packet),
        "sweep" => Ok(StreamMode::Sweep),
        _ => Err(PyValueError::new_err(format!("mode must be 'packet' or 'sweep', got {mode:?}"))),
    }
}

fn net_preset(name: &str) -> PyResult<NetConfig> {
    NetConfig::preset(name).ok_or_else(|| PyValueError::new_err(format!("unknown network preset {name:?}")))
}

/// A simulated packet stream with its label tracks.
#[pyclass(module = "strobe", frozen)]
struct Scenario {
    sim: Simulator,
    frames: Vec<SimFrame>,
    labels: ScenarioLabels,
}

#[pymethods]
impl Scenario {
    #[new]
    #[pyo3(signature = (name, seed = 0))]
    fn new(name: &str, seed: u64) -> PyResult<Self> {
        let cfg = library::scenario(name, seed)
            .ok_or_else(|| PyValueError::new_err(format!("unknown scenario {name:?}")))?;
        let (sim, frames) = generate_scenario(cfg).map_err(py_err)?;
        let labels = ScenarioLabels::new(&sim, &frames);
        Ok(Scenario { sim, frames, labels })
    }

    #[getter]
    fn name(&self) -> String {
        self.labels.scenario.clone()
    }

    #[getter]
    fn packet_count(&self) -> usize {
        self.frames.len()
    }

    #[getter]
    fn actor_count(&self) -> usize {
        self.sim.tracks().len()
    }

    /// Points of packet `i` as `(x, y, z, t_us)` tuples in the world frame.
    fn points(&self, i: usize) -> PyResult<Vec<(f32, f32, f32, u64)>> {
        let f = self.frames.get(i).ok_or_else(|| PyValueError::new_err(format!("packet {i} out of range")))?;
        Ok(f.packet.points.iter().map(|p| (p.x, p.y, p.z, p.t.micros())).collect())
    }

    /// `(t_start_us, t_end_us)` of packet `i`.
    fn packet_times(&self, i: usize) -> PyResult<(u64, u64)> {
        let f = self.frames.get(i).ok_or_else(|| PyValueError::new_err(format!("packet {i} out of range")))?;
        Ok((f.packet.t_start.micros(), f.packet.t_end.micros()))
    }

    fn labels_json(&self) -> PyResult<String> {
        self.labels.to_json().map_err(py_err)
    }
}

/// One decoded detection in the world frame.
#[pyclass(module = "strobe", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Detection {
    class_name: &'static str,
    cx: f64,
    cy: f64,
    length: Option<f64>,
    width: Option<f64>,
    heading: Option<f64>,
    score: f64,
    emitted_at_us: u64,
}

impl From<&DetBox> for Detection {
    fn from(d: &DetBox) -> Self {
        Detection {
            class_name: d.class.name(),
            cx: d.cx,
            cy: d.cy,
            length: d.length,
            width: d.width,
            heading: d.heading,
            score: d.score,
            emitted_at_us: d.emitted_at.micros(),
        }
    }
}

#[pymethods]
impl Detection {
    fn __repr__(&self) -> String {
        format!(
            "Detection({}, cx={:.2}, cy={:.2}, score={:.3}, t={}us)",
            self.class_name, self.cx, self.cy, self.score, self.emitted_at_us
        )
    }
}

/// Detections plus the Rust-side boxes they came from, for scoring.
#[pyclass(module = "strobe", frozen)]
struct DetectionSet {
    boxes: Vec<DetBox>,
    mode: StreamMode,
    inference_ms: Vec<f64>,
}

#[pymethods]
impl DetectionSet {
    fn __len__(&self) -> usize {
        self.boxes.len()
    }

    fn detections(&self) -> Vec<Detection> {
        self.boxes.iter().map(Detection::from).collect()
    }

    #[getter]
    fn inference_ms(&self) -> Vec<f64> {
        self.inference_ms.clone()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.mode.name()
    }
}

#[pyclass(module = "strobe")]
struct Detector {
    inner: net::Detector,
}

#[pymethods]
impl Detector {
    /// Weights come from `weights` (a checkpoint path) or are initialized
    /// from `seed`.
    #[new]
    #[pyo3(signature = (network = "toy", weights = None, seed = 0, no_memory = false, no_map = false))]
    fn new(network: &str, weights: Option<PathBuf>, seed: u64, no_memory: bool, no_map: bool) -> PyResult<Self> {
        let cfg = net_preset(network)?;
        let w = match weights {
            Some(p) => Checkpoint::load(&p, &cfg).map_err(py_err)?.weights,
            None => NetworkWeights::init(&cfg, seed),
        };
        let inner = net::Detector::new(cfg, w, Flags { no_memory, no_map }).map_err(py_err)?;
        Ok(Detector { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.weights().param_count()
    }

    #[pyo3(signature = (scenario, mode = "packet"))]
    fn run(&self, scenario: &Scenario, mode: &str) -> PyResult<DetectionSet> {
        let mode = parse_mode(mode)?;
        let packets: Vec<_> = scenario.frames.iter().map(|f| f.packet.clone()).collect();
        let pps = scenario.labels.packets_per_sweep as usize;
        let out = self.inner.process_stream(&packets, scenario.sim.map(), mode, pps).map_err(py_err)?;
        Ok(DetectionSet { boxes: out.detections, mode, inference_ms: out.inference_ms })
    }
}

/// Trains for `steps` sequences and writes a checkpoint; returns the loss per step.
#[pyfunction]
#[pyo3(signature = (scenario, network = "toy", steps = 10, seed = 0, learning_rate = 0.02, checkpoint = None))]
fn train(
    scenario: &Scenario,
    network: &str,
    steps: u64,
    seed: u64,
    learning_rate: f64,
    checkpoint: Option<PathBuf>,
) -> PyResult<Vec<f64>> {
    let cfg = net_preset(network)?;
    let tc = TrainConfig { steps, seed, learning_rate, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg.clone(), tc, NetworkWeights::init(&cfg, seed)).map_err(py_err)?;
    let mut losses = Vec::new();
    while t.step < steps {
        losses.push(t.train_step(&scenario.frames, scenario.sim.map()).map_err(py_err)?.stats.total);
    }
    if let Some(p) = checkpoint {
        let ck = Checkpoint { step: t.step, weights: t.weights.clone(), velocity: Some(t.velocity.clone()) };
        ck.write(&p).map_err(py_err)?;
    }
    Ok(losses)
}

/// Perfect detections at observation time, emitted when each frame completes.
#[pyfunction]
#[pyo3(signature = (scenario, mode = "packet"))]
fn oracle(scenario: &Scenario, mode: &str) -> PyResult<DetectionSet> {
    let mode = parse_mode(mode)?;
    let boxes = eval::oracle_detections(&scenario.labels, mode, &EvalConfig::default()).map_err(py_err)?;
    Ok(DetectionSet { boxes, mode, inference_ms: Vec::new() })
}

/// Both-mode AP report as a JSON string.
#[pyfunction]
#[pyo3(signature = (scenario, detections, zero_point_only = false))]
fn evaluate(scenario: &Scenario, detections: &DetectionSet, zero_point_only: bool) -> PyResult<String> {
    let cfg = EvalConfig { zero_point_only, ..EvalConfig::default() };
    let r = eval::evaluate(&scenario.labels, &detections.boxes, detections.mode, &cfg).map_err(py_err)?;
    r.to_json().map_err(py_err)
}

/// IoU of two `(cx, cy, length, width, heading)` boxes.
#[pyfunction]
fn rotated_iou(a: (f64, f64, f64, f64, f64), b: (f64, f64, f64, f64, f64)) -> f64 {
    let mk = |t: (f64, f64, f64, f64, f64)| OrientedBox::new(t.0, t.1, t.2, t.3, t.4);
    iou(&mk(a), &mk(b))
}

/// All-point AP from `(score, is_true_positive)` pairs.
#[pyfunction]
fn average_precision(flags: Vec<(f64, bool)>, label_count: usize) -> f64 {
    eval::average_precision(&flags, label_count)
}

#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    library::SCENARIOS.to_vec()
}

#[pyfunction]
fn class_names() -> Vec<&'static str> {
    ClassId::ALL.iter().map(|c| c.name()).collect()
}

#[pymodule]
fn strobe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Detection>()?;
    m.add_class::<DetectionSet>()?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rotated_iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    Ok(())
}
