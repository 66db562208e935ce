//! Pipelined acquire -> transfer -> infer orchestration, latency profiling,
//! prediction logging and cue-schedule evaluation.

pub mod eval;
pub mod log;
pub mod report;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use eval::{evaluate, Cue, CueSchedule, EvalResult, DEFAULT_OFFSET_S};
pub use log::{LogRow, LogWriter, PredictionLog};
pub use report::{bench_report, BenchSummary, LatencyReport, StageSummary};

use crate::bridge::{start_session, BridgeConfig, BridgeError, WindowQueue};
use crate::link::{channel_pair, Controller, Geometry, LinkError, Peripheral, SocketTransport, Transport};
use crate::nn::{load_model, AnyModel, NnError};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("model is {actual} but {requested} inference was requested")]
    ModeMismatch {
        requested: &'static str,
        actual: &'static str,
    },
    #[error("prediction log is empty")]
    EmptyLog,
    #[error("latency report holds no windows")]
    EmptyReport,
    #[error("malformed prediction log: {0}")]
    MalformedLog(String),
    #[error("invalid cue schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    /// In-process channel pair.
    Channel,
    /// Loopback TCP pair.
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Float,
    Int8,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Float => "float",
            Mode::Int8 => "int8",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ModelSource {
    Path(PathBuf),
    Loaded(Arc<AnyModel>),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub bridge: BridgeConfig,
    pub link: LinkKind,
    pub model: ModelSource,
    pub mode: Mode,
    /// Stream time to run after warm-up. Windows extending past it are not
    /// taken; a shorter source ends the run early.
    pub duration: Duration,
    pub log_path: Option<PathBuf>,
    /// External stop request (signal handler, tests).
    pub stop: Option<Arc<AtomicBool>>,
}

impl PipelineConfig {
    pub fn new(bridge: BridgeConfig, model: ModelSource, mode: Mode, duration: Duration) -> Self {
        Self {
            bridge,
            link: LinkKind::Channel,
            model,
            mode,
            duration,
            log_path: None,
            stop: None,
        }
    }

    fn load_model(&self) -> Result<Arc<AnyModel>, RuntimeError> {
        let model = match &self.model {
            ModelSource::Path(p) => Arc::new(load_model(p)?),
            ModelSource::Loaded(m) => Arc::clone(m),
        };
        let actual = if model.is_int8() { Mode::Int8 } else { Mode::Float };
        if actual != self.mode {
            return Err(RuntimeError::ModeMismatch {
                requested: self.mode.name(),
                actual: actual.name(),
            });
        }
        model.check_input(self.bridge.window_len * self.bridge.channel_count())?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy)]
struct CaptureInfo {
    captured_at: Instant,
    fill: Duration,
}

/// Capture timestamps keyed by first_seq. Instrumentation only: window data
/// travels through the queue and the link.
type CaptureTable = Arc<Mutex<HashMap<u64, CaptureInfo>>>;

fn ms_since(epoch: Instant, t: Instant) -> f64 {
    t.saturating_duration_since(epoch).as_secs_f64() * 1e3
}

/// Runs the three-stage pipeline against a live emulator until `duration`
/// of post-warm-up stream has been windowed, the stream ends, or `stop` is
/// raised.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(PredictionLog, LatencyReport), RuntimeError> {
    if cfg.duration.is_zero() {
        return Err(RuntimeError::InvalidConfig("duration must be positive".into()));
    }
    let model = cfg.load_model()?;
    let mut writer = cfg.log_path.as_deref().map(LogWriter::create).transpose()?;
    let mut session = start_session(&cfg.bridge)?;
    let epoch = session.started_at();
    let run_start = Instant::now();

    let geom = Geometry {
        window_len: cfg.bridge.window_len,
        channel_count: cfg.bridge.channel_count(),
    };
    let rate = cfg.bridge.acquisition.sample_rate_hz as f64;
    let last_frame = cfg.bridge.warmup_discard + (cfg.duration.as_secs_f64() * rate).round() as u64;
    // Stall guard: a source that stops delivering frames cannot hang the run.
    let wall_deadline = run_start + cfg.duration.mul_f64(1.5) + Duration::from_secs(5);
    let external = cfg.stop.clone().unwrap_or_default();

    let queue = Arc::new(WindowQueue::new(cfg.bridge.queue_capacity));
    let captures: CaptureTable = Arc::default();

    let acquisition = {
        let queue = Arc::clone(&queue);
        let captures = Arc::clone(&captures);
        let external = Arc::clone(&external);
        let window_len = cfg.bridge.window_len as u64;
        thread::Builder::new().name("acquire".into()).spawn(move || {
            let stop = || external.load(Ordering::Relaxed) || Instant::now() >= wall_deadline;
            let result = loop {
                match session.next_window(&stop) {
                    Ok(Some(w)) if w.first_seq + window_len <= last_frame => {
                        captures.lock().expect("capture table").insert(
                            w.first_seq,
                            CaptureInfo {
                                captured_at: w.captured_at,
                                fill: w.fill_time,
                            },
                        );
                        queue.push(w);
                    }
                    Ok(_) | Err(BridgeError::StreamClosed) => break Ok(()),
                    Err(e) => break Err(e),
                }
            };
            queue.close();
            let _ = session.send_stop();
            result.map(|_| session.stats())
        })?
    };

    let stats = match cfg.link {
        LinkKind::Channel => {
            let (p, c) = channel_pair();
            run_stages(p, c, geom, &queue, &model, &captures, writer.as_mut(), epoch)
        }
        LinkKind::Socket => {
            let (p, c) = SocketTransport::pair()?;
            run_stages(p, c, geom, &queue, &model, &captures, writer.as_mut(), epoch)
        }
    };
    if stats.is_err() {
        external.store(true, Ordering::Relaxed);
    }
    let acq = acquisition.join().expect("acquisition thread panicked");
    let (log, mut report, link_ms) = stats?;
    let bridge_stats = acq?;

    report.link_ms = link_ms;
    report.emitted = queue.pushed();
    report.dropped = queue.dropped();
    report.wall_s = log
        .rows
        .last()
        .map(|r| (r.infer_end_ms - ms_since(epoch, run_start)) / 1e3)
        .unwrap_or(0.0);
    ::log::info!(
        "pipeline done: {} windows, {} dropped, {} frames received",
        report.windows,
        report.dropped,
        bridge_stats.frames_received
    );
    Ok((log, report))
}

/// Link peripheral on its own thread; the inference consumer runs on the
/// calling thread and owns the log writer.
#[allow(clippy::too_many_arguments)]
fn run_stages<T: Transport + 'static>(
    peripheral: T,
    controller: T,
    geom: Geometry,
    queue: &Arc<WindowQueue>,
    model: &AnyModel,
    captures: &CaptureTable,
    mut writer: Option<&mut LogWriter>,
    epoch: Instant,
) -> Result<(PredictionLog, LatencyReport, Vec<f64>), RuntimeError> {
    let link = {
        let queue = Arc::clone(queue);
        thread::Builder::new()
            .name("link".into())
            .spawn(move || -> Result<Vec<f64>, LinkError> {
                let mut p = Peripheral::new(peripheral);
                loop {
                    match queue.pop_timeout(Duration::from_millis(100)) {
                        Ok(Some(w)) => {
                            p.send_window(&w)?;
                        }
                        Ok(None) => {}
                        Err(()) => break,
                    }
                }
                Ok(p.into_stats().durations.iter().map(|d| d.as_secs_f64() * 1e3).collect())
            })?
    };

    let mut controller = Controller::new(controller, geom);
    let mut log = PredictionLog::default();
    let mut report = LatencyReport::default();
    let consumed: Result<(), RuntimeError> = loop {
        let w = match controller.fetch_window(Duration::from_millis(200)) {
            Ok(w) => w,
            Err(LinkError::Timeout(_)) => continue,
            Err(LinkError::LinkClosed) => break Ok(()),
            Err(e) => break Err(e.into()),
        };
        let fetched = Instant::now();
        let info = captures.lock().expect("capture table").remove(&w.first_seq);
        let info = info.unwrap_or(CaptureInfo {
            captured_at: fetched,
            fill: Duration::ZERO,
        });
        let t0 = Instant::now();
        let pred = match model.infer(&w) {
            Ok(p) => p,
            Err(e) => break Err(e.into()),
        };
        let t1 = Instant::now();
        let row = LogRow {
            first_seq: w.first_seq,
            capture_ms: ms_since(epoch, info.captured_at),
            fetch_ms: ms_since(epoch, fetched),
            infer_start_ms: ms_since(epoch, t0),
            infer_end_ms: ms_since(epoch, t1),
            label: pred.label,
            probabilities: pred.probabilities,
        };
        if let Some(wr) = writer.as_deref_mut() {
            if let Err(e) = wr.append(&row) {
                break Err(e);
            }
        }
        report.fill_ms.push(info.fill.as_secs_f64() * 1e3);
        report.transfer_ms.push(row.fetch_ms - row.capture_ms);
        report.inference_ms.push(row.infer_end_ms - row.infer_start_ms);
        report.end_to_end_ms.push(row.infer_end_ms - row.capture_ms);
        report.windows += 1;
        log.rows.push(row);
    };
    // Unblocks the peripheral if the consumer bailed out early.
    drop(controller);
    if consumed.is_err() {
        queue.close();
    }
    let link_result = link.join().expect("link thread panicked");
    consumed?;
    let link_ms = match link_result {
        Ok(v) => v,
        Err(LinkError::LinkClosed) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    Ok((log, report, link_ms))
}
