//! Burst-transfer link between the acquisition side (peripheral, offers one
//! window at a time) and the inference side (controller, pulls it).
//!
//! Exchange per window:
//!
//! ```text
//! peripheral  READY(0xA5) ->
//! controller                 <- REQ(0x5A)
//! peripheral  LEN(u32 LE) ++ payload ->
//! controller                 <- ACK(0x06)
//! ```
//!
//! The payload is the window's `first_seq` as u64 LE followed by its samples,
//! time-major, as i16 LE. Two transports carry the same byte exchange: an
//! in-process channel pair and a loopback TCP socket.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bridge::Window;

pub const READY: u8 = 0xA5;
pub const REQ: u8 = 0x5A;
pub const ACK: u8 = 0x06;

/// Bound on each step after READY; a stalled peer surfaces as `Timeout`.
const STEP_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("link closed by peer")]
    LinkClosed,
    #[error("a window is already offered and not yet fetched")]
    OfferWhileBusy,
    #[error("no window offered")]
    NothingOffered,
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("declared length {declared}, expected/received {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unexpected control byte {got:#04x} while waiting for {expected}")]
    Protocol { expected: &'static str, got: u8 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Byte pipe underneath the handshake.
pub trait Transport: Send {
    fn send(&mut self, bytes: &[u8]) -> Result<(), LinkError>;
    /// Fills `buf` completely. `deadline` bounds the wait for the first byte
    /// and for the rest; `None` waits indefinitely.
    fn recv_exact(&mut self, buf: &mut [u8], deadline: Option<Instant>) -> Result<(), LinkError>;
}

/// One side of an in-process channel pair.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: VecDeque<u8>,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelTransport {
            tx: a_tx,
            rx: a_rx,
            pending: VecDeque::new(),
        },
        ChannelTransport {
            tx: b_tx,
            rx: b_rx,
            pending: VecDeque::new(),
        },
    )
}

impl Transport for ChannelTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), LinkError> {
        self.tx.send(bytes.to_vec()).map_err(|_| LinkError::LinkClosed)
    }

    fn recv_exact(&mut self, buf: &mut [u8], deadline: Option<Instant>) -> Result<(), LinkError> {
        let mut filled = 0;
        while filled < buf.len() {
            if self.pending.is_empty() {
                let chunk = match deadline {
                    None => self.rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                    Some(d) => self.rx.recv_timeout(d.saturating_duration_since(Instant::now())),
                };
                match chunk {
                    Ok(c) => self.pending.extend(c),
                    Err(RecvTimeoutError::Timeout) => return Err(LinkError::Timeout("data")),
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(if filled > 0 {
                            short_read(buf.len(), filled)
                        } else {
                            LinkError::LinkClosed
                        })
                    }
                }
            }
            let n = (buf.len() - filled).min(self.pending.len());
            for (dst, src) in buf[filled..filled + n].iter_mut().zip(self.pending.drain(..n)) {
                *dst = src;
            }
            filled += n;
        }
        Ok(())
    }
}

fn short_read(declared: usize, actual: usize) -> LinkError {
    LinkError::LengthMismatch { declared, actual }
}

/// Loopback TCP transport.
pub struct SocketTransport {
    stream: TcpStream,
}

impl SocketTransport {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    /// Connected loopback pair: (peripheral side, controller side).
    pub fn pair() -> io::Result<(Self, Self)> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let client = TcpStream::connect(listener.local_addr()?)?;
        let (server, _) = listener.accept()?;
        Ok((Self::new(client)?, Self::new(server)?))
    }
}

impl Transport for SocketTransport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), LinkError> {
        self.stream.write_all(bytes).map_err(|e| match e.kind() {
            io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted => {
                LinkError::LinkClosed
            }
            _ => LinkError::Io(e),
        })
    }

    fn recv_exact(&mut self, buf: &mut [u8], deadline: Option<Instant>) -> Result<(), LinkError> {
        let mut filled = 0;
        while filled < buf.len() {
            let timeout = match deadline {
                None => None,
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(LinkError::Timeout("data"));
                    }
                    Some(left)
                }
            };
            self.stream.set_read_timeout(timeout)?;
            match self.stream.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(if filled > 0 {
                        short_read(buf.len(), filled)
                    } else {
                        LinkError::LinkClosed
                    })
                }
                Ok(n) => filled += n,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(LinkError::Timeout("data"))
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted
                    ) =>
                {
                    return Err(LinkError::LinkClosed)
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

/// Window geometry both ends agree on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub window_len: usize,
    pub channel_count: usize,
}

impl Geometry {
    pub fn payload_len(&self) -> usize {
        8 + self.window_len * self.channel_count * 2
    }
}

pub fn encode_payload(w: &Window) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + w.byte_size());
    out.extend_from_slice(&w.first_seq.to_le_bytes());
    for s in &w.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_payload(bytes: &[u8], geom: Geometry) -> Result<Window, LinkError> {
    if bytes.len() != geom.payload_len() {
        return Err(LinkError::LengthMismatch {
            declared: bytes.len(),
            actual: geom.payload_len(),
        });
    }
    let first_seq = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let samples = bytes[8..]
        .chunks_exact(2)
        .map(|p| i16::from_le_bytes([p[0], p[1]]))
        .collect();
    Ok(Window::new(geom.window_len, geom.channel_count, first_seq, samples))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkStats {
    /// READY sent to ACK received, per transfer.
    pub durations: Vec<Duration>,
    pub bytes_moved: u64,
    pub transfers: u64,
}

/// Offering (acquisition) end.
pub struct Peripheral<T: Transport> {
    transport: T,
    slot: Option<(Vec<u8>, Instant)>,
    stats: LinkStats,
}

impl<T: Transport> Peripheral<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            slot: None,
            stats: LinkStats::default(),
        }
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    pub fn is_busy(&self) -> bool {
        self.slot.is_some()
    }

    /// Signals READY and parks `w` in the single slot. Does not wait.
    pub fn offer(&mut self, w: &Window) -> Result<(), LinkError> {
        if self.slot.is_some() {
            return Err(LinkError::OfferWhileBusy);
        }
        let payload = encode_payload(w);
        let t0 = Instant::now();
        self.transport.send(&[READY])?;
        self.slot = Some((payload, t0));
        Ok(())
    }

    /// Serves the controller's request for the parked window and waits for
    /// its ACK. `timeout` bounds the wait for REQ; `None` waits forever.
    pub fn complete(&mut self, timeout: Option<Duration>) -> Result<Duration, LinkError> {
        let Some((payload, t0)) = self.slot.as_ref() else {
            return Err(LinkError::NothingOffered);
        };
        let mut byte = [0u8; 1];
        self.transport
            .recv_exact(&mut byte, timeout.map(|t| Instant::now() + t))?;
        if byte[0] != REQ {
            return Err(LinkError::Protocol {
                expected: "REQ",
                got: byte[0],
            });
        }
        let mut burst = Vec::with_capacity(4 + payload.len());
        burst.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        burst.extend_from_slice(payload);
        self.transport.send(&burst)?;
        self.transport
            .recv_exact(&mut byte, Some(Instant::now() + STEP_TIMEOUT))?;
        if byte[0] != ACK {
            return Err(LinkError::Protocol {
                expected: "ACK",
                got: byte[0],
            });
        }
        let elapsed = t0.elapsed();
        self.stats.bytes_moved += payload.len() as u64;
        self.stats.transfers += 1;
        self.stats.durations.push(elapsed);
        self.slot = None;
        Ok(elapsed)
    }

    /// Offer and wait until fetched.
    pub fn send_window(&mut self, w: &Window) -> Result<Duration, LinkError> {
        self.offer(w)?;
        self.complete(None)
    }

    pub fn into_stats(self) -> LinkStats {
        self.stats
    }
}

/// Fetching (inference) end.
pub struct Controller<T: Transport> {
    transport: T,
    geom: Geometry,
    fetches: u64,
}

impl<T: Transport> Controller<T> {
    pub fn new(transport: T, geom: Geometry) -> Self {
        Self {
            transport,
            geom,
            fetches: 0,
        }
    }

    pub fn fetches(&self) -> u64 {
        self.fetches
    }

    /// Waits up to `timeout` for READY, then pulls one window.
    pub fn fetch_window(&mut self, timeout: Duration) -> Result<Window, LinkError> {
        let mut byte = [0u8; 1];
        match self.transport.recv_exact(&mut byte, Some(Instant::now() + timeout)) {
            Err(LinkError::Timeout(_)) => return Err(LinkError::Timeout("READY")),
            r => r?,
        }
        if byte[0] != READY {
            return Err(LinkError::Protocol {
                expected: "READY",
                got: byte[0],
            });
        }
        self.transport.send(&[REQ])?;
        let mut len = [0u8; 4];
        self.transport
            .recv_exact(&mut len, Some(Instant::now() + STEP_TIMEOUT))?;
        let declared = u32::from_le_bytes(len) as usize;
        let expected = self.geom.payload_len();
        if declared != expected {
            return Err(LinkError::LengthMismatch {
                declared,
                actual: expected,
            });
        }
        let mut payload = vec![0u8; declared];
        self.transport
            .recv_exact(&mut payload, Some(Instant::now() + STEP_TIMEOUT))?;
        self.transport.send(&[ACK])?;
        self.fetches += 1;
        decode_payload(&payload, self.geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn window(seq: u64) -> Window {
        let samples = (0..20 * 192)
            .map(|i| (i as i16).wrapping_mul(31).wrapping_sub(seq as i16))
            .collect();
        Window::new(20, 192, seq, samples)
    }

    const GEOM: Geometry = Geometry {
        window_len: 20,
        channel_count: 192,
    };

    #[test]
    fn payload_size_at_defaults() {
        let p = encode_payload(&window(0));
        assert_eq!(p.len() - 8, 7680);
        assert_eq!(decode_payload(&p, GEOM).unwrap(), window(0));
    }

    #[test]
    fn channel_round_trip() {
        let (a, b) = channel_pair();
        let mut per = Peripheral::new(a);
        let mut ctl = Controller::new(b, GEOM);
        let w = window(1000);
        per.offer(&w).unwrap();
        let h = thread::spawn(move || ctl.fetch_window(Duration::from_secs(1)).unwrap());
        per.complete(Some(Duration::from_secs(1))).unwrap();
        assert_eq!(h.join().unwrap(), w);
        assert_eq!(per.stats().transfers, 1);
        assert_eq!(per.stats().bytes_moved, 7688);
    }

    #[test]
    fn second_offer_is_rejected() {
        let (a, _b) = channel_pair();
        let mut per = Peripheral::new(a);
        per.offer(&window(0)).unwrap();
        assert!(matches!(per.offer(&window(20)), Err(LinkError::OfferWhileBusy)));
    }

    #[test]
    fn fetch_times_out_without_offer() {
        let (_a, b) = channel_pair();
        let mut ctl = Controller::new(b, GEOM);
        let t0 = Instant::now();
        assert!(matches!(
            ctl.fetch_window(Duration::from_millis(50)),
            Err(LinkError::Timeout("READY"))
        ));
        assert!(t0.elapsed() >= Duration::from_millis(45));
    }

    #[test]
    fn wrong_declared_length() {
        let (mut a, b) = channel_pair();
        let mut ctl = Controller::new(b, GEOM);
        let h = thread::spawn(move || ctl.fetch_window(Duration::from_secs(1)));
        a.send(&[READY]).unwrap();
        let mut req = [0u8];
        a.recv_exact(&mut req, None).unwrap();
        assert_eq!(req[0], REQ);
        a.send(&100u32.to_le_bytes()).unwrap();
        assert!(matches!(
            h.join().unwrap(),
            Err(LinkError::LengthMismatch { declared: 100, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let (a, b) = SocketTransport::pair().unwrap();
        let mut ctl = Controller::new(b, GEOM);
        let h = thread::spawn(move || ctl.fetch_window(Duration::from_secs(1)));
        let mut a = a;
        a.send(&[READY]).unwrap();
        let mut req = [0u8];
        a.recv_exact(&mut req, None).unwrap();
        a.send(&(GEOM.payload_len() as u32).to_le_bytes()).unwrap();
        a.send(&[0u8; 100]).unwrap();
        drop(a);
        assert!(matches!(
            h.join().unwrap(),
            Err(LinkError::LengthMismatch { declared, actual: 100 }) if declared == GEOM.payload_len()
        ));
    }

    #[test]
    fn closed_peer() {
        let (a, b) = channel_pair();
        drop(a);
        let mut ctl = Controller::new(b, GEOM);
        assert!(matches!(
            ctl.fetch_window(Duration::from_millis(50)),
            Err(LinkError::LinkClosed)
        ));
    }
}
