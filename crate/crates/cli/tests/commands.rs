use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use strobe_core::io::{read_detections, Checkpoint, PacketFile};
use strobe_core::net::NetConfig;

fn strobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strobe")).args(args).output().unwrap()
}

fn outputs(dir: &Path) -> Value {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    json!({
        "packets": p("packets.strbp"),
        "labels": p("labels.json"),
        "detections": p("detections.jsonl"),
        "timings": p("timings.csv"),
        "report": p("report.json"),
        "report_text": p("report.txt"),
        "checkpoint": p("weights.strbw"),
        "loss_csv": p("loss.csv"),
        "bench": p("bench.json"),
    })
}

/// Writes a config into a fresh directory; `extra` is merged at top level.
fn setup(extra: Value) -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = json!({ "network": "tiny", "scenario": "stationary_grid", "outputs": outputs(dir.path()) });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.path().join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let path = path.to_string_lossy().into_owned();
    (dir, path)
}

fn ok(args: &[&str]) -> String {
    let out = strobe(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(cfg: &str, extra: &[&str]) {
    for cmd in ["simulate", "infer", "eval"] {
        let mut args = vec![cmd, "--config", cfg];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

#[test]
fn simulate_infer_eval() {
    let (dir, cfg) = setup(json!({}));
    let out = ok(&["simulate", "--config", &cfg]);
    assert!(out.starts_with("100 packets"), "{out}");
    let file = PacketFile::read(&dir.path().join("packets.strbp")).unwrap();
    assert_eq!(file.packets.len(), 100);
    assert_eq!(file.packets.iter().map(|p| p.sweep).max(), Some(9));
    ok(&["infer", "--config", &cfg]);
    let report = ok(&["eval", "--config", &cfg]);
    assert!(report.contains("Latency mAP") && report.contains("Common mAP"), "{report}");
    let json: Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["mode"], "packet");
}

#[test]
fn overrides_reach_the_detections_header() {
    let (dir, cfg) = setup(json!({}));
    pipeline(&cfg, &["--mode", "sweep", "--no-memory", "--seed", "4"]);
    let f = std::fs::File::open(dir.path().join("detections.jsonl")).unwrap();
    let (h, _) = read_detections(std::io::BufReader::new(f)).unwrap();
    assert_eq!((h.seed, h.no_memory, h.no_map, h.batches), (4, true, false, 10));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, cfg_a) = setup(json!({ "seed": 3 }));
    let (b, cfg_b) = setup(json!({ "seed": 3 }));
    pipeline(&cfg_a, &[]);
    pipeline(&cfg_b, &[]);
    for f in ["packets.strbp", "labels.json", "detections.jsonl", "report.json", "report.txt"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn invalid_configs_exit_with_2() {
    for bad in [
        json!({ "network": "huge" }),
        json!({ "scenario": "nowhere" }),
        json!({ "bogus": 1 }),
        json!({ "train": { "warmup": 3 } }),
        json!({ "eval": { "vehicle_iou": [0.5, -0.7] } }),
    ] {
        let (_dir, cfg) = setup(bad.clone());
        let out = strobe(&["simulate", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{bad}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    let out = strobe(&["simulate", "--config", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_foreign_detections() {
    let (dir, cfg) = setup(json!({}));
    pipeline(&cfg, &[]);
    ok(&["simulate", "--config", &cfg, "--seed", "1"]);
    let out = strobe(&["eval", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    drop(dir);
}

fn train_cfg(steps: u64, resume: bool) -> Value {
    json!({
        "scenario": "crossing_pedestrians",
        "resume": resume,
        "train": { "steps": steps, "checkpoint_every": 2 },
    })
}

#[test]
fn interrupted_training_resumes_to_the_same_weights() {
    let (full, cfg) = setup(train_cfg(4, false));
    let out = strobe(&["train", "--config", &cfg]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("40 warm-up + 10 BPTT"));

    let (part, cfg) = setup(train_cfg(2, false));
    ok(&["train", "--config", &cfg]);
    let resumed = outputs(part.path());
    let cfg_text = json!({ "network": "tiny", "scenario": "crossing_pedestrians", "resume": true,
        "train": { "steps": 4, "checkpoint_every": 2 }, "outputs": resumed });
    std::fs::write(&cfg, cfg_text.to_string()).unwrap();
    let out = strobe(&["train", "--config", &cfg]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming from step 2"));

    let read = |d: &Path| std::fs::read(d.join("weights.strbw")).unwrap();
    assert!(read(full.path()) == read(part.path()), "resumed weights differ");
    let ck = Checkpoint::load(&part.path().join("weights.strbw"), &NetConfig::tiny(32)).unwrap();
    assert_eq!(ck.step, 4);
    let csv = |d: &Path| std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(csv(full.path()), csv(part.path()));

    // a checkpoint beyond the schedule cannot be resumed
    let cfg_text = json!({ "network": "tiny", "scenario": "crossing_pedestrians", "resume": true,
        "train": { "steps": 3 }, "outputs": outputs(part.path()) });
    std::fs::write(&cfg, cfg_text.to_string()).unwrap();
    assert_eq!(strobe(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn bench_reports_both_modes() {
    let (dir, cfg) = setup(json!({}));
    let out = ok(&["bench", "--config", &cfg]);
    assert!(out.contains("packet") && out.contains("sweep") && out.contains("ratio"), "{out}");
    let json: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(json["packet"]["accumulation_ms"], 10.0);
    assert_eq!(json["sweep"]["accumulation_ms"], 100.0);
}
