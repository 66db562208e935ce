use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use neuroedge::bridge::{BridgeConfig, Window};
use neuroedge::emulator::{
    run_emulator, write_recording, EmulatorConfig, Pacing, SessionRecording, SessionScript, Source, Synth,
};
use neuroedge::nn::{load_model, quantize_model, save_model, AnyModel};
use neuroedge::runtime::{
    bench_report, evaluate, run_pipeline, CueSchedule, LatencyReport, LinkKind, Mode, ModelSource, PipelineConfig,
    PredictionLog, DEFAULT_OFFSET_S,
};

#[derive(Parser)]
#[command(
    name = "neuroedge",
    version,
    about = "HD-EMG streaming, burst link and 1D CNN inference on the desk"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Channel,
    Socket,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve a synthetic (or replayed) amplifier stream over TCP.
    Emulate {
        #[arg(long, default_value = "127.0.0.1:31000")]
        listen: String,
        /// JSON list of {class, duration_s}.
        #[arg(long, required_unless_present = "replay")]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        unpaced: bool,
        /// Replay a recorded CSV session instead of synthesizing.
        #[arg(long, conflicts_with = "script")]
        replay: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        rate: u32,
    },
    /// Write a labeled synthetic session to CSV.
    Record {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        rate: u32,
        #[arg(long, default_value_t = 192)]
        channels: usize,
    },
    /// Stream, transfer and classify windows in real time.
    Run {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        int8: bool,
        #[arg(long, default_value_t = 20)]
        hop: usize,
        /// Seconds of post-warm-up stream to process.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "channel")]
        link: LinkArg,
    },
    /// Post-training int8 quantization of a float NEMW model.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Recording CSV whose windows calibrate activation ranges.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        rate: u32,
    },
    /// Score a prediction log against a cue schedule.
    Evaluate {
        #[arg(long)]
        log: PathBuf,
        /// JSON list of {time_s, class}.
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = DEFAULT_OFFSET_S)]
        offset: f64,
        #[arg(long)]
        json: bool,
    },
    /// Summarize a latency report.
    Bench {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = Arc::clone(&flag);
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("no signal handler: {e}");
    }
    flag
}

fn calibration_windows(rec: &SessionRecording, len: usize, hop: usize) -> Vec<Window> {
    let c = rec.channel_count;
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= rec.rows.len() {
        let samples = rec.rows[start..start + len]
            .iter()
            .flat_map(|r| r.samples.iter().copied())
            .collect();
        out.push(Window::new(len, c, start as u64, samples));
        start += hop;
    }
    out
}

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.cmd {
        Cmd::Emulate {
            listen,
            script,
            seed,
            unpaced,
            replay,
            rate,
        } => {
            let source = match (replay, script) {
                (Some(path), _) => Source::Replay(Arc::new(SessionRecording::load(&path, rate, None)?)),
                (None, Some(path)) => Source::Synthetic(SessionScript::load(&path)?),
                (None, None) => unreachable!("clap requires one source"),
            };
            let mut cfg = EmulatorConfig::synthetic(listen, SessionScript::cycle(1, 1.0), seed);
            cfg.source = source;
            cfg.pacing = if unpaced { Pacing::Unpaced } else { Pacing::Realtime };
            let handle = run_emulator(cfg)?;
            eprintln!("emulator listening on {}", handle.local_addr());
            let stop = stop_flag();
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(100));
            }
            eprintln!("shutting down after {} frames", handle.frames_sent());
            handle.shutdown();
        }
        Cmd::Record {
            out,
            script,
            seed,
            rate,
            channels,
        } => {
            let script = SessionScript::load(&script)?;
            let synth = Synth::new(seed, channels, 50.0, 250.0);
            write_recording(&script, &synth, rate, &out)?;
            eprintln!("wrote {} frames to {}", script.total_frames(rate), out.display());
        }
        Cmd::Run {
            endpoint,
            model,
            int8,
            hop,
            duration,
            log,
            report,
            link,
        } => {
            if !(duration.is_finite() && duration > 0.0) {
                return Err("--duration must be positive".into());
            }
            let bridge = BridgeConfig {
                endpoint,
                hop,
                ..BridgeConfig::default()
            };
            let mode = if int8 { Mode::Int8 } else { Mode::Float };
            let mut cfg = PipelineConfig::new(
                bridge,
                ModelSource::Path(model),
                mode,
                Duration::from_secs_f64(duration),
            );
            cfg.link = match link {
                LinkArg::Channel => LinkKind::Channel,
                LinkArg::Socket => LinkKind::Socket,
            };
            cfg.log_path = Some(log);
            cfg.stop = Some(stop_flag());
            let (_, rep) = run_pipeline(&cfg)?;
            rep.save(&report)?;
            if let Ok(summary) = bench_report(&rep) {
                print!("{}", summary.to_text());
            }
        }
        Cmd::Quantize {
            model,
            calib,
            out,
            rate,
        } => {
            let AnyModel::Float(m) = load_model(&model)? else {
                return Err("input model is already int8".into());
            };
            let rec = SessionRecording::load(&calib, rate, None)?;
            let defaults = BridgeConfig::default();
            let windows = calibration_windows(&rec, defaults.window_len, defaults.hop);
            let q = quantize_model(&m, &windows)?;
            save_model(&AnyModel::Int8(q), &out)?;
            eprintln!("calibrated on {} windows, wrote {}", windows.len(), out.display());
        }
        Cmd::Evaluate {
            log,
            schedule,
            offset,
            json,
        } => {
            let log = PredictionLog::load(&log)?;
            let sched = CueSchedule::load(&schedule, offset)?;
            let r = evaluate(&log, &sched)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!(
                    "accuracy {:.4} over {} windows ({} before first cue excluded), {} segments",
                    r.accuracy, r.windows_evaluated, r.windows_excluded, r.segments_evaluated
                );
                for (i, row) in r.confusion.iter().enumerate() {
                    let acc = r.per_class_accuracy[i].map_or("-".to_string(), |a| format!("{a:.3}"));
                    println!("{:<14}{:?}  {acc}", neuroedge::emulator::CLASS_NAMES[i], row);
                }
            }
        }
        Cmd::Bench { report, json } => {
            let s = bench_report(&LatencyReport::load(&report)?)?;
            if json {
                println!("{}", s.to_json());
            } else {
                print!("{}", s.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
