//! Acquisition-side client: commands the amplifier, drops warm-up frames and
//! cuts the sample stream into fixed-length windows.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{encode_command, AcquisitionConfig, Control, ProtocolError, SampleFrame, StreamDecoder};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid bridge config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connect to {endpoint} failed: {source}")]
    ConnectFailed {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("stream closed by server")]
    StreamClosed,
    #[error("frame has {got} channels, expected {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub endpoint: String,
    pub acquisition: AcquisitionConfig,
    pub window_len: usize,
    pub hop: usize,
    pub warmup_discard: u64,
    pub queue_capacity: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "127.0.0.1:23456".to_string(),
            acquisition: AcquisitionConfig::default(),
            window_len: 20,
            hop: 20,
            warmup_discard: 1000,
            queue_capacity: 4,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        self.acquisition.validate()?;
        if self.window_len == 0 {
            return Err(BridgeError::InvalidConfig("window_len must be >= 1".into()));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(BridgeError::InvalidConfig(format!(
                "hop must be in 1..={}, got {}",
                self.window_len, self.hop
            )));
        }
        if self.queue_capacity == 0 {
            return Err(BridgeError::InvalidConfig("queue capacity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.acquisition.channel_count as usize
    }

    /// Nominal time to collect `hop` fresh frames.
    pub fn hop_duration(&self) -> Duration {
        Duration::from_secs_f64(self.hop as f64 / self.acquisition.sample_rate_hz as f64)
    }
}

/// `window_len` consecutive frames, time-major: row `t` holds every channel
/// of frame `first_seq + t`.
///
/// Equality compares geometry, `first_seq` and samples; timestamps are
/// local bookkeeping and do not survive a link transfer.
#[derive(Debug, Clone)]
pub struct Window {
    pub window_len: usize,
    pub channel_count: usize,
    pub first_seq: u64,
    pub samples: Vec<i16>,
    pub captured_at: Instant,
    /// Time from arrival of the oldest frame to emission.
    pub fill_time: Duration,
}

impl PartialEq for Window {
    fn eq(&self, other: &Self) -> bool {
        self.window_len == other.window_len
            && self.channel_count == other.channel_count
            && self.first_seq == other.first_seq
            && self.samples == other.samples
    }
}

impl Eq for Window {}

impl Window {
    pub fn new(window_len: usize, channel_count: usize, first_seq: u64, samples: Vec<i16>) -> Self {
        assert_eq!(samples.len(), window_len * channel_count, "window sample count");
        Self {
            window_len,
            channel_count,
            first_seq,
            samples,
            captured_at: Instant::now(),
            fill_time: Duration::ZERO,
        }
    }

    pub fn sample(&self, t: usize, ch: usize) -> i16 {
        self.samples[t * self.channel_count + ch]
    }

    pub fn row(&self, t: usize) -> &[i16] {
        &self.samples[t * self.channel_count..(t + 1) * self.channel_count]
    }

    /// Size of the sample block on the wire.
    pub fn byte_size(&self) -> usize {
        self.samples.len() * 2
    }

    pub fn sample_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        for s in &self.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }
}

/// Sliding-window assembler over a shifting ring of the last `window_len`
/// frames.
#[derive(Debug)]
pub struct WindowAssembler {
    window_len: usize,
    hop: usize,
    channel_count: usize,
    ring: Vec<i16>,
    arrivals: Vec<Instant>,
    seqs: Vec<u64>,
    head: usize,
    fill: usize,
    since_emit: usize,
    emitted_any: bool,
}

impl WindowAssembler {
    pub fn new(window_len: usize, hop: usize, channel_count: usize) -> Self {
        assert!(window_len >= 1 && (1..=window_len).contains(&hop));
        Self {
            window_len,
            hop,
            channel_count,
            ring: vec![0; window_len * channel_count],
            arrivals: vec![Instant::now(); window_len],
            seqs: vec![0; window_len],
            head: 0,
            fill: 0,
            since_emit: 0,
            emitted_any: false,
        }
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn push_frame(&mut self, frame: &SampleFrame) -> Result<Option<Window>, BridgeError> {
        self.push_frame_at(frame, Instant::now())
    }

    pub fn push_frame_at(&mut self, frame: &SampleFrame, arrived: Instant) -> Result<Option<Window>, BridgeError> {
        if frame.samples.len() != self.channel_count {
            return Err(BridgeError::ChannelMismatch {
                expected: self.channel_count,
                got: frame.samples.len(),
            });
        }
        let c = self.channel_count;
        let slot = self.head;
        self.ring[slot * c..(slot + 1) * c].copy_from_slice(&frame.samples);
        self.arrivals[slot] = arrived;
        self.seqs[slot] = frame.seq;
        self.head = (self.head + 1) % self.window_len;
        self.fill = (self.fill + 1).min(self.window_len);
        self.since_emit += 1;

        let due = if self.emitted_any {
            self.since_emit == self.hop
        } else {
            self.fill == self.window_len
        };
        if self.fill < self.window_len || !due {
            return Ok(None);
        }
        self.since_emit = 0;
        self.emitted_any = true;

        // Ring is full, so the oldest frame sits at `head`.
        let oldest = self.head;
        let split = oldest * c;
        let mut samples = Vec::with_capacity(self.ring.len());
        samples.extend_from_slice(&self.ring[split..]);
        samples.extend_from_slice(&self.ring[..split]);
        let now = Instant::now();
        Ok(Some(Window {
            window_len: self.window_len,
            channel_count: c,
            first_seq: self.seqs[oldest],
            samples,
            captured_at: now,
            fill_time: now.saturating_duration_since(self.arrivals[oldest]),
        }))
    }
}

/// Bounded window queue; a push into a full queue evicts the oldest entry.
#[derive(Debug)]
pub struct WindowQueue {
    inner: Mutex<QueueState>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
    pushed: AtomicU64,
}

#[derive(Debug)]
struct QueueState {
    items: VecDeque<Window>,
    closed: bool,
}

impl WindowQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            inner: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                closed: false,
            }),
            ready: Condvar::new(),
            capacity,
            dropped: AtomicU64::new(0),
            pushed: AtomicU64::new(0),
        }
    }

    /// Never blocks. Returns the evicted window, if any.
    pub fn push(&self, w: Window) -> Option<Window> {
        let mut st = self.inner.lock().unwrap();
        let evicted = if st.items.len() == self.capacity {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            st.items.pop_front()
        } else {
            None
        };
        st.items.push_back(w);
        self.pushed.fetch_add(1, Ordering::Relaxed);
        drop(st);
        self.ready.notify_one();
        evicted
    }

    /// Waits up to `timeout`. `Ok(None)` means timed out; `Err(())` means the
    /// queue is closed and drained.
    #[allow(clippy::result_unit_err)]
    pub fn pop_timeout(&self, timeout: Duration) -> Result<Option<Window>, ()> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.lock().unwrap();
        loop {
            if let Some(w) = st.items.pop_front() {
                return Ok(Some(w));
            }
            if st.closed {
                return Err(());
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            st = self.ready.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn pushed(&self) -> u64 {
        self.pushed.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub bytes_received: u64,
    pub frames_received: u64,
    pub frames_discarded: u64,
    pub windows_emitted: u64,
}

/// A connected, started acquisition session.
pub struct Session {
    cfg: BridgeConfig,
    stream: TcpStream,
    decoder: StreamDecoder,
    assembler: WindowAssembler,
    pending: VecDeque<(SampleFrame, Instant)>,
    buf: Vec<u8>,
    stats: SessionStats,
    started_at: Instant,
}

const READ_POLL: Duration = Duration::from_millis(50);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Connects, sends stop then start, and consumes the warm-up frames.
pub fn start_session(cfg: &BridgeConfig) -> Result<Session, BridgeError> {
    cfg.validate()?;
    let addrs: Vec<SocketAddr> = cfg
        .endpoint
        .to_socket_addrs()
        .map_err(|source| BridgeError::ConnectFailed {
            endpoint: cfg.endpoint.clone(),
            source,
        })?
        .collect();
    let mut last_err = io::Error::new(io::ErrorKind::NotFound, "no address resolved");
    let mut stream = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(2)) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last_err = e,
        }
    }
    let mut stream = stream.ok_or_else(|| BridgeError::ConnectFailed {
        endpoint: cfg.endpoint.clone(),
        source: last_err,
    })?;
    stream.set_nodelay(true)?;

    let stop = encode_command(&cfg.acquisition, Control::Stop)?;
    let start = encode_command(&cfg.acquisition, Control::Start)?;
    stream
        .write_all(stop.as_bytes())
        .and_then(|_| stream.write_all(start.as_bytes()))
        .map_err(|e| BridgeError::HandshakeFailed(format!("sending commands: {e}")))?;
    let started_at = Instant::now();
    stream.set_read_timeout(Some(READ_POLL))?;

    let channels = cfg.channel_count();
    let mut session = Session {
        cfg: cfg.clone(),
        stream,
        decoder: StreamDecoder::new(channels),
        assembler: WindowAssembler::new(cfg.window_len, cfg.hop, channels),
        pending: VecDeque::new(),
        buf: vec![0u8; 64 * 1024],
        stats: SessionStats::default(),
        started_at,
    };

    while session.decoder.next_seq() < cfg.warmup_discard {
        if started_at.elapsed() > HANDSHAKE_TIMEOUT {
            return Err(BridgeError::HandshakeFailed(
                "timed out waiting for warm-up frames".into(),
            ));
        }
        match session.read_some() {
            Ok(_) => {}
            Err(BridgeError::StreamClosed) => {
                return Err(BridgeError::HandshakeFailed("connection closed by server".into()))
            }
            Err(BridgeError::Io(e)) if is_reset(&e) => {
                return Err(BridgeError::HandshakeFailed(format!("connection reset: {e}")))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(session)
}

fn is_reset(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
    )
}

impl Session {
    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    /// Instant the start command was sent; frame `seq` nominally arrives
    /// `seq / sample_rate` after it.
    pub fn started_at(&self) -> Instant {
        self.started_at
    }

    /// One read from the socket. Returns the number of frames decoded; zero
    /// on a poll timeout.
    fn read_some(&mut self) -> Result<usize, BridgeError> {
        let n = match self.stream.read(&mut self.buf) {
            Ok(0) => return Err(BridgeError::StreamClosed),
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(0),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => return Ok(0),
            Err(e) if is_reset(&e) => return Err(BridgeError::StreamClosed),
            Err(e) => return Err(e.into()),
        };
        let now = Instant::now();
        self.stats.bytes_received += n as u64;
        let warmup = self.cfg.warmup_discard;
        let mut decoded = 0;
        let (stats, pending) = (&mut self.stats, &mut self.pending);
        self.decoder.feed_with(&self.buf[..n], |f| {
            decoded += 1;
            stats.frames_received += 1;
            if f.seq < warmup {
                stats.frames_discarded += 1;
            } else {
                pending.push_back((f, now));
            }
        });
        Ok(decoded)
    }

    /// Next post-warm-up frame; `Ok(None)` when nothing arrived within the
    /// poll interval.
    pub fn next_frame(&mut self) -> Result<Option<SampleFrame>, BridgeError> {
        if self.pending.is_empty() {
            self.read_some()?;
        }
        Ok(self.pending.pop_front().map(|(f, _)| f))
    }

    fn next_frame_timed(&mut self) -> Result<Option<(SampleFrame, Instant)>, BridgeError> {
        if self.pending.is_empty() {
            self.read_some()?;
        }
        Ok(self.pending.pop_front())
    }

    /// Next assembled window, blocking across poll intervals until one is
    /// ready or `stop` returns true.
    pub fn next_window(&mut self, stop: &dyn Fn() -> bool) -> Result<Option<Window>, BridgeError> {
        loop {
            if stop() {
                return Ok(None);
            }
            if let Some((f, at)) = self.next_frame_timed()? {
                if let Some(w) = self.assembler.push_frame_at(&f, at)? {
                    self.stats.windows_emitted += 1;
                    return Ok(Some(w));
                }
            }
        }
    }

    /// Asks the server to halt streaming. The connection stays open.
    pub fn send_stop(&mut self) -> Result<(), BridgeError> {
        let stop = encode_command(&self.cfg.acquisition, Control::Stop)?;
        self.stream.write_all(stop.as_bytes())?;
        Ok(())
    }
}

/// Reads until `stop` fires or the stream ends, publishing windows to
/// `queue`. Network reads never wait on the consumer: a full queue drops its
/// oldest window. The queue is closed on return.
pub fn acquisition_loop(
    session: &mut Session,
    queue: &WindowQueue,
    stop: &dyn Fn() -> bool,
    mut on_window: impl FnMut(&Window),
) -> Result<(), BridgeError> {
    let result = loop {
        match session.next_window(stop) {
            Ok(Some(w)) => {
                on_window(&w);
                queue.push(w);
            }
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    queue.close();
    result
}
