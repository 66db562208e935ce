//! Amplifier wire protocol: the 40-byte command frame, the headerless sample
//! stream and the CRC-8/MAXIM checksum that protects commands.
//!
//! Command frame layout (multi-byte fields little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 2    | magic `0x51 0x43` ("QC")       |
//! | 2      | 1    | version (`0x01`)               |
//! | 3      | 1    | control: `0x00` stop, `0x01` start |
//! | 4      | 2    | sample rate (Hz)               |
//! | 6      | 2    | channel count                  |
//! | 8      | 2    | high-pass corner (0.01 Hz)     |
//! | 10     | 2    | low-pass corner (Hz)           |
//! | 12     | 1    | detection mode                 |
//! | 13     | 1    | analog output selector         |
//! | 14     | 25   | reserved, zero                 |
//! | 39     | 1    | CRC-8/MAXIM over bytes 0..39   |
//!
//! Samples travel as back-to-back frames of `channel_count` little-endian
//! `i16` values with no per-frame header.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COMMAND_LEN: usize = 40;
pub const MAGIC: [u8; 2] = [0x51, 0x43];
pub const VERSION: u8 = 0x01;
pub const MAX_CHANNELS: u16 = 384;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid acquisition config: {0}")]
    InvalidConfig(&'static str),
    #[error("bad command magic {0:#04x} {1:#04x}")]
    BadMagic(u8, u8),
    #[error("command checksum mismatch: stored {stored:#04x}, computed {computed:#04x}")]
    ChecksumMismatch { stored: u8, computed: u8 },
    #[error("unsupported command version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown control code {0:#04x}")]
    UnknownControl(u8),
    #[error("reserved command bytes must be zero")]
    ReservedNonZero,
}

static CRC8_MAXIM_TABLE: [u8; 256] = build_crc8_maxim_table();

const fn build_crc8_maxim_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x01 != 0 { (crc >> 1) ^ 0x8C } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-8/MAXIM (Dallas 1-Wire): polynomial 0x31 reflected (0x8C), init 0x00,
/// reflected in and out, no final xor.
pub fn crc8_maxim(data: &[u8]) -> u8 {
    data.iter().fold(0u8, |crc, &b| CRC8_MAXIM_TABLE[(crc ^ b) as usize])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    Stop,
    Start,
}

impl Control {
    fn code(self) -> u8 {
        match self {
            Control::Stop => 0x00,
            Control::Start => 0x01,
        }
    }
}

/// Acquisition parameters carried by every command frame.
///
/// `detection_mode` and `analog_out` are opaque selector codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub sample_rate_hz: u16,
    pub channel_count: u16,
    pub highpass_centihz: u16,
    pub lowpass_hz: u16,
    pub detection_mode: u8,
    pub analog_out: u8,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 512,
            channel_count: 192,
            highpass_centihz: 30,
            lowpass_hz: 500,
            detection_mode: 0,
            analog_out: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.sample_rate_hz == 0 {
            return Err(ProtocolError::InvalidConfig("sample rate must be positive"));
        }
        if self.channel_count == 0 {
            return Err(ProtocolError::InvalidConfig("channel count must be positive"));
        }
        if self.channel_count > MAX_CHANNELS {
            return Err(ProtocolError::InvalidConfig("channel count exceeds 384"));
        }
        Ok(())
    }

    /// Bytes per sample frame on the wire.
    pub fn frame_bytes(&self) -> usize {
        self.channel_count as usize * 2
    }
}

/// A validated 40-byte command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandFrame([u8; COMMAND_LEN]);

impl CommandFrame {
    pub fn as_bytes(&self) -> &[u8; COMMAND_LEN] {
        &self.0
    }

    pub fn into_bytes(self) -> [u8; COMMAND_LEN] {
        self.0
    }
}

pub fn encode_command(cfg: &AcquisitionConfig, control: Control) -> Result<CommandFrame, ProtocolError> {
    cfg.validate()?;
    let mut b = [0u8; COMMAND_LEN];
    b[0..2].copy_from_slice(&MAGIC);
    b[2] = VERSION;
    b[3] = control.code();
    b[4..6].copy_from_slice(&cfg.sample_rate_hz.to_le_bytes());
    b[6..8].copy_from_slice(&cfg.channel_count.to_le_bytes());
    b[8..10].copy_from_slice(&cfg.highpass_centihz.to_le_bytes());
    b[10..12].copy_from_slice(&cfg.lowpass_hz.to_le_bytes());
    b[12] = cfg.detection_mode;
    b[13] = cfg.analog_out;
    b[39] = crc8_maxim(&b[..39]);
    Ok(CommandFrame(b))
}

pub fn decode_command(bytes: &[u8; COMMAND_LEN]) -> Result<(AcquisitionConfig, Control), ProtocolError> {
    if bytes[0..2] != MAGIC {
        return Err(ProtocolError::BadMagic(bytes[0], bytes[1]));
    }
    let computed = crc8_maxim(&bytes[..39]);
    if computed != bytes[39] {
        return Err(ProtocolError::ChecksumMismatch {
            stored: bytes[39],
            computed,
        });
    }
    if bytes[2] != VERSION {
        return Err(ProtocolError::UnsupportedVersion(bytes[2]));
    }
    let control = match bytes[3] {
        0x00 => Control::Stop,
        0x01 => Control::Start,
        other => return Err(ProtocolError::UnknownControl(other)),
    };
    if bytes[14..39].iter().any(|&b| b != 0) {
        return Err(ProtocolError::ReservedNonZero);
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let cfg = AcquisitionConfig {
        sample_rate_hz: u16_at(4),
        channel_count: u16_at(6),
        highpass_centihz: u16_at(8),
        lowpass_hz: u16_at(10),
        detection_mode: bytes[12],
        analog_out: bytes[13],
    };
    cfg.validate()?;
    Ok((cfg, control))
}

/// One simultaneous sample across all channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFrame {
    pub seq: u64,
    pub samples: Vec<i16>,
}

pub fn encode_frame(samples: &[i16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    encode_frame_into(samples, &mut out);
    out
}

pub fn encode_frame_into(samples: &[i16], out: &mut Vec<u8>) {
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

/// Reassembles sample frames from arbitrarily split reads.
#[derive(Debug)]
pub struct StreamDecoder {
    channel_count: usize,
    residual: Vec<u8>,
    next_seq: u64,
}

impl StreamDecoder {
    pub fn new(channel_count: usize) -> Self {
        assert!(channel_count > 0, "channel count must be positive");
        Self {
            channel_count,
            residual: Vec::with_capacity(channel_count * 4),
            next_seq: 0,
        }
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn residual_len(&self) -> usize {
        self.residual.len()
    }

    /// Sequence number the next emitted frame will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<SampleFrame> {
        let mut frames = Vec::new();
        self.feed_with(bytes, |f| frames.push(f));
        frames
    }

    /// Like [`feed`](Self::feed) but hands each frame to `sink` without
    /// collecting.
    pub fn feed_with(&mut self, mut bytes: &[u8], mut sink: impl FnMut(SampleFrame)) {
        let frame_len = self.channel_count * 2;
        if !self.residual.is_empty() {
            let need = frame_len - self.residual.len();
            let take = need.min(bytes.len());
            self.residual.extend_from_slice(&bytes[..take]);
            bytes = &bytes[take..];
            if self.residual.len() < frame_len {
                return;
            }
            let mut buf = std::mem::take(&mut self.residual);
            sink(self.decode_one(&buf));
            buf.clear();
            self.residual = buf;
        }
        let mut chunks = bytes.chunks_exact(frame_len);
        for chunk in &mut chunks {
            let frame = self.decode_one(chunk);
            sink(frame);
        }
        self.residual.extend_from_slice(chunks.remainder());
    }

    fn decode_one(&mut self, chunk: &[u8]) -> SampleFrame {
        let samples = chunk
            .chunks_exact(2)
            .map(|p| i16::from_le_bytes([p[0], p[1]]))
            .collect();
        let seq = self.next_seq;
        self.next_seq += 1;
        SampleFrame { seq, samples }
    }
}
