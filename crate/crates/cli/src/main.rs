use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use strobe_core::cli::{self, Overrides, RunConfig};
use strobe_core::eval::StreamMode;

#[derive(Parser)]
#[command(name = "strobe", version, about = "Packet-level streaming LiDAR detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario's packet file and label sidecar.
    Simulate(Common),
    /// Run the detector over a packet file.
    Infer(Common),
    /// Train on a scenario, writing checkpoints and a loss CSV.
    Train(Common),
    /// Score detections against labels.
    Eval(Common),
    /// Time packet-mode and sweep-mode inference.
    Bench(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Packet,
    Sweep,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    no_memory: bool,
    #[arg(long)]
    no_map: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> strobe_core::Result<RunConfig> {
        let ov = Overrides {
            mode: self.mode.map(|m| match m {
                Mode::Packet => StreamMode::Packet,
                Mode::Sweep => StreamMode::Sweep,
            }),
            no_memory: self.no_memory,
            no_map: self.no_map,
            seed: self.seed,
        };
        RunConfig::load(self.config.as_deref(), &ov)
    }
}

// stdout may be a closed pipe (`strobe eval | head`); that is not an error
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn run(cmd: Command) -> strobe_core::Result<()> {
    match cmd {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            let s = cli::simulate(&cfg)?;
            outln!(
                "{} packets, {} actors, {} points -> {}",
                s.packets,
                s.actors,
                s.points,
                cfg.outputs.packets.display()
            );
        }
        Command::Infer(c) => {
            let cfg = c.load()?;
            let s = cli::infer(&cfg)?;
            let mean = s.inference_ms.iter().sum::<f64>() / s.inference_ms.len().max(1) as f64;
            outln!(
                "{} batches, {} detections, mean inference {:.2} ms -> {}",
                s.batches,
                s.detections,
                mean,
                cfg.outputs.detections.display()
            );
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let t = cli::train(&cfg, |m| eprintln!("{m}"))?;
            outln!("trained {} steps -> {}", t.step, cfg.outputs.checkpoint.display());
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let out = cli::evaluate(&cfg)?;
            out!("{}", out.report.to_text());
            if let Some(l) = out.latency {
                outln!(
                    "inference p50 {:.2} ms, p95 {:.2} ms, total {:.2} ms",
                    l.inference_p50_ms, l.inference_p95_ms, l.total_ms
                );
            }
        }
        Command::Bench(c) => {
            let cfg = c.load()?;
            out!("{}", cli::bench(&cfg)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
