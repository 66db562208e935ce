//! Amplifier stand-in: a single-client TCP stream server that obeys command
//! frames and emits paced sample frames from synthetic or recorded data.
//!
//! A malformed command (bad magic, checksum, version) closes the connection;
//! there is no reply channel. A `start` while streaming is ignored, a
//! `start` after `stop` begins a fresh acquisition at frame 0, and the
//! connection is closed once the source is exhausted.

mod recording;
mod synth;

pub use recording::{write_recording, RecordingRow, ScriptStep, SessionRecording, SessionScript};
pub use synth::{Synth, CLASS_COUNT, CLASS_NAMES};

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{decode_command, encode_frame_into, AcquisitionConfig, Control, ProtocolError, COMMAND_LEN};

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error("class id {0} outside 0..=6")]
    InvalidClass(i32),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("malformed recording: {0}")]
    MalformedRecording(String),
    #[error("invalid emulator config: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Frame `n` is released at `n / sample_rate` after start.
    Realtime,
    /// As fast as the socket accepts.
    Unpaced,
}

#[derive(Debug, Clone)]
pub enum Source {
    Synthetic(SessionScript),
    Replay(Arc<SessionRecording>),
}

#[derive(Debug, Clone)]
pub struct EmulatorConfig {
    pub listen: String,
    pub source: Source,
    pub seed: u64,
    pub pacing: Pacing,
    pub baseline_sigma: f64,
    pub active_sigma: f64,
}

impl EmulatorConfig {
    pub fn synthetic(listen: impl Into<String>, script: SessionScript, seed: u64) -> Self {
        Self {
            listen: listen.into(),
            source: Source::Synthetic(script),
            seed,
            pacing: Pacing::Realtime,
            baseline_sigma: 50.0,
            active_sigma: 250.0,
        }
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        if !(self.active_sigma > self.baseline_sigma && self.baseline_sigma > 0.0) {
            return Err(EmulatorError::InvalidConfig(
                "need active_sigma > baseline_sigma > 0".into(),
            ));
        }
        match &self.source {
            Source::Synthetic(s) => s.validate(),
            Source::Replay(r) => r.validate(),
        }
    }
}

/// Observable server-side events, for tests and logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerEvent {
    Connected,
    Command(Control),
    RejectedCommand(ProtocolError),
    SourceExhausted,
    Disconnected,
}

pub struct EmulatorHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    events: Arc<Mutex<Vec<ServerEvent>>>,
    frames_sent: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl EmulatorHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn events(&self) -> Vec<ServerEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn commands(&self) -> Vec<Control> {
        self.events()
            .into_iter()
            .filter_map(|e| match e {
                ServerEvent::Command(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    pub fn frames_sent(&self) -> u64 {
        self.frames_sent.load(Ordering::Relaxed)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until the server thread exits (it only exits on shutdown).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for EmulatorHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `cfg.listen` and serves clients one at a time on a background
/// thread.
pub fn run_emulator(cfg: EmulatorConfig) -> Result<EmulatorHandle, EmulatorError> {
    cfg.validate()?;
    let listener = TcpListener::bind(&cfg.listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let events = Arc::new(Mutex::new(Vec::new()));
    let frames_sent = Arc::new(AtomicU64::new(0));
    let server = Server {
        cfg,
        shutdown: shutdown.clone(),
        events: events.clone(),
        frames_sent: frames_sent.clone(),
    };
    let thread = thread::Builder::new()
        .name("emulator".into())
        .spawn(move || server.serve(listener))?;
    Ok(EmulatorHandle {
        addr,
        shutdown,
        events,
        frames_sent,
        thread: Some(thread),
    })
}

struct Server {
    cfg: EmulatorConfig,
    shutdown: Arc<AtomicBool>,
    events: Arc<Mutex<Vec<ServerEvent>>>,
    frames_sent: Arc<AtomicU64>,
}

enum Incoming {
    Command(AcquisitionConfig, Control),
    Rejected(ProtocolError),
    Closed,
}

struct Streaming {
    acq: AcquisitionConfig,
    started: Instant,
    next: u64,
    total: u64,
    labels: Vec<u8>,
}

const POLL: Duration = Duration::from_millis(20);
const UNPACED_BATCH: u64 = 256;

impl Server {
    fn log(&self, e: ServerEvent) {
        log::debug!("emulator: {e:?}");
        self.events.lock().unwrap().push(e);
    }

    fn serve(self, listener: TcpListener) {
        while !self.shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("emulator: client {peer} connected");
                    self.log(ServerEvent::Connected);
                    if let Err(e) = self.handle(stream) {
                        log::debug!("emulator: connection ended: {e}");
                    }
                    self.log(ServerEvent::Disconnected);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("emulator: accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    }

    fn handle(&self, mut stream: TcpStream) -> io::Result<()> {
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        let reader_thread = thread::spawn(move || {
            let mut buf = [0u8; COMMAND_LEN];
            loop {
                if reader.read_exact(&mut buf).is_err() {
                    let _ = tx.send(Incoming::Closed);
                    return;
                }
                let msg = match decode_command(&buf) {
                    Ok((cfg, ctrl)) => Incoming::Command(cfg, ctrl),
                    Err(e) => Incoming::Rejected(e),
                };
                let stop = matches!(msg, Incoming::Rejected(_));
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
        });

        let result = self.stream_loop(&mut stream, &rx);
        let _ = stream.shutdown(Shutdown::Both);
        let _ = reader_thread.join();
        result
    }

    fn stream_loop(&self, stream: &mut TcpStream, rx: &mpsc::Receiver<Incoming>) -> io::Result<()> {
        let mut state: Option<Streaming> = None;
        let mut out = Vec::new();
        let mut scratch = Vec::new();
        loop {
            if self.shutdown.load(Ordering::SeqCst) {
                return Ok(());
            }
            // Wait for commands until the next frame is due.
            let wait = match (&state, self.cfg.pacing) {
                (None, _) => POLL,
                (Some(_), Pacing::Unpaced) => Duration::ZERO,
                (Some(s), Pacing::Realtime) => {
                    let due = s.started + Duration::from_secs_f64(s.next as f64 / s.acq.sample_rate_hz as f64);
                    due.saturating_duration_since(Instant::now()).min(POLL)
                }
            };
            let msg = if wait.is_zero() {
                rx.try_recv().map_err(|e| match e {
                    mpsc::TryRecvError::Empty => RecvTimeoutError::Timeout,
                    mpsc::TryRecvError::Disconnected => RecvTimeoutError::Disconnected,
                })
            } else {
                rx.recv_timeout(wait)
            };
            match msg {
                Ok(Incoming::Command(acq, Control::Start)) => {
                    self.log(ServerEvent::Command(Control::Start));
                    if state.is_none() {
                        match self.begin(acq) {
                            Some(s) => state = Some(s),
                            None => return Ok(()),
                        }
                    }
                    continue;
                }
                Ok(Incoming::Command(_, Control::Stop)) => {
                    self.log(ServerEvent::Command(Control::Stop));
                    state = None;
                    continue;
                }
                Ok(Incoming::Rejected(e)) => {
                    log::warn!("emulator: rejecting command: {e}");
                    self.log(ServerEvent::RejectedCommand(e));
                    return Ok(());
                }
                Ok(Incoming::Closed) | Err(RecvTimeoutError::Disconnected) => return Ok(()),
                Err(RecvTimeoutError::Timeout) => {}
            }

            let Some(s) = state.as_mut() else { continue };
            let due = match self.cfg.pacing {
                Pacing::Unpaced => s.next + UNPACED_BATCH,
                Pacing::Realtime => {
                    let elapsed = s.started.elapsed().as_secs_f64();
                    (elapsed * s.acq.sample_rate_hz as f64).floor() as u64 + 1
                }
            }
            .min(s.total);
            if due <= s.next {
                continue;
            }
            out.clear();
            let channels = s.acq.channel_count as usize;
            scratch.resize(channels, 0i16);
            for t in s.next..due {
                self.render(s, t, &mut scratch);
                encode_frame_into(&scratch, &mut out);
            }
            stream.write_all(&out)?;
            self.frames_sent.fetch_add(due - s.next, Ordering::Relaxed);
            s.next = due;
            if s.next >= s.total {
                self.log(ServerEvent::SourceExhausted);
                return Ok(());
            }
        }
    }

    fn begin(&self, acq: AcquisitionConfig) -> Option<Streaming> {
        let rate = acq.sample_rate_hz as u32;
        let (total, labels) = match &self.cfg.source {
            Source::Synthetic(script) => {
                let labels: Vec<u8> = script.labels(rate).collect();
                (labels.len() as u64, labels)
            }
            Source::Replay(rec) => {
                if rec.channel_count != acq.channel_count as usize {
                    log::warn!(
                        "emulator: recording has {} channels, command asks for {}",
                        rec.channel_count,
                        acq.channel_count
                    );
                    return None;
                }
                (rec.rows.len() as u64, Vec::new())
            }
        };
        Some(Streaming {
            acq,
            started: Instant::now(),
            next: 0,
            total,
            labels,
        })
    }

    fn render(&self, s: &Streaming, t: u64, out: &mut [i16]) {
        match &self.cfg.source {
            Source::Synthetic(_) => {
                let synth = Synth::new(self.cfg.seed, out.len(), self.cfg.baseline_sigma, self.cfg.active_sigma);
                synth
                    .fill_frame(s.labels[t as usize], t, out)
                    .expect("script classes validated");
            }
            Source::Replay(rec) => out.copy_from_slice(&rec.rows[t as usize].samples),
        }
    }
}
