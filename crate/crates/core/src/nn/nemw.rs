//! NEMW weight container, little-endian throughout:
//!
//! ```text
//! "NEMW" | version u16 | dtype u8 (0 f32, 1 i8) | layer_count u8 | layers... | crc8 u8
//! ```
//!
//! Layer records start with a type byte (1 conv1d, 2 relu, 3 maxpool,
//! 4 gap, 5 fc, 6 softmax).
//!
//! * conv1d: in, out, kernel, stride (u16 each)
//! * fc: in, out (u16 each)
//!
//! then, for int8 files only, `w_scale f32, in_scale f32, in_zp i8,
//! out_scale f32, out_zp i8`, then the weights (f32 or i8) and biases
//! (f32 or i32). maxpool carries kernel and stride as u16; relu, gap and
//! softmax have no body. The trailing byte is CRC-8/MAXIM over everything
//! before it.

use std::fs;
use std::path::Path;

use super::model::{Layer, Model};
use super::ops::{Conv1dLayer, FcLayer};
use super::quant::{QConv1d, QFc, QLayer, QuantModel, QuantParams};
use super::NnError;
use crate::protocol::crc8_maxim;

pub const MAGIC: &[u8; 4] = b"NEMW";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

const T_CONV: u8 = 1;
const T_RELU: u8 = 2;
const T_MAXPOOL: u8 = 3;
const T_GAP: u8 = 4;
const T_FC: u8 = 5;
const T_SOFTMAX: u8 = 6;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Float(Model),
    Int8(QuantModel),
}

impl AnyModel {
    pub fn is_int8(&self) -> bool {
        matches!(self, AnyModel::Int8(_))
    }
}

impl From<Model> for AnyModel {
    fn from(m: Model) -> Self {
        AnyModel::Float(m)
    }
}

impl From<QuantModel> for AnyModel {
    fn from(m: QuantModel) -> Self {
        AnyModel::Int8(m)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn i8(&mut self, v: i8) {
        self.0.push(v as u8);
    }
    fn u16(&mut self, v: usize) -> Result<(), NnError> {
        let v = u16::try_from(v).map_err(|_| NnError::ModelInvalid(format!("dimension {v} exceeds u16")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn qparams(&mut self, w_scale: f32, input: QuantParams, output: QuantParams) {
        self.f32(w_scale);
        self.f32(input.scale);
        self.i8(input.zero_point);
        self.f32(output.scale);
        self.i8(output.zero_point);
    }
}

pub fn encode(model: &AnyModel) -> Result<Vec<u8>, NnError> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    match model {
        AnyModel::Float(m) => {
            w.u8(DTYPE_F32);
            w.u8(layer_count(m.layers().len())?);
            for l in m.layers() {
                match l {
                    Layer::Conv1d(c) => {
                        w.u8(T_CONV);
                        w.u16(c.in_channels)?;
                        w.u16(c.out_channels)?;
                        w.u16(c.kernel)?;
                        w.u16(c.stride)?;
                        c.weights.iter().for_each(|&v| w.f32(v));
                        c.bias.iter().for_each(|&v| w.f32(v));
                    }
                    Layer::Fc(f) => {
                        w.u8(T_FC);
                        w.u16(f.in_features)?;
                        w.u16(f.out_features)?;
                        f.weights.iter().for_each(|&v| w.f32(v));
                        f.bias.iter().for_each(|&v| w.f32(v));
                    }
                    Layer::MaxPool { kernel, stride } => {
                        w.u8(T_MAXPOOL);
                        w.u16(*kernel)?;
                        w.u16(*stride)?;
                    }
                    Layer::Relu => w.u8(T_RELU),
                    Layer::GlobalAvgPool => w.u8(T_GAP),
                    Layer::Softmax => w.u8(T_SOFTMAX),
                }
            }
        }
        AnyModel::Int8(m) => {
            w.u8(DTYPE_I8);
            w.u8(layer_count(m.layers().len())?);
            for l in m.layers() {
                match l {
                    QLayer::Conv1d(c) => {
                        w.u8(T_CONV);
                        w.u16(c.in_channels)?;
                        w.u16(c.out_channels)?;
                        w.u16(c.kernel)?;
                        w.u16(c.stride)?;
                        w.qparams(c.w_scale, c.input, c.output);
                        c.weights.iter().for_each(|&v| w.i8(v));
                        c.bias.iter().for_each(|&v| w.i32(v));
                    }
                    QLayer::Fc(f) => {
                        w.u8(T_FC);
                        w.u16(f.in_features)?;
                        w.u16(f.out_features)?;
                        w.qparams(f.w_scale, f.input, f.output);
                        f.weights.iter().for_each(|&v| w.i8(v));
                        f.bias.iter().for_each(|&v| w.i32(v));
                    }
                    QLayer::MaxPool { kernel, stride } => {
                        w.u8(T_MAXPOOL);
                        w.u16(*kernel)?;
                        w.u16(*stride)?;
                    }
                    QLayer::Relu => w.u8(T_RELU),
                    QLayer::GlobalAvgPool => w.u8(T_GAP),
                    QLayer::Softmax => w.u8(T_SOFTMAX),
                }
            }
        }
    }
    let crc = crc8_maxim(&w.0);
    w.u8(crc);
    Ok(w.0)
}

fn layer_count(n: usize) -> Result<u8, NnError> {
    u8::try_from(n).map_err(|_| NnError::ModelInvalid(format!("{n} layers exceed the u8 layer count")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(NnError::TruncatedFile { offset: self.pos })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn i8(&mut self) -> Result<i8, NnError> {
        Ok(self.u8()? as i8)
    }
    fn u16(&mut self) -> Result<usize, NnError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }
    fn f32(&mut self) -> Result<f32, NnError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, NnError> {
        let b = self.take(n.checked_mul(4).ok_or(NnError::TruncatedFile { offset: self.pos })?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn i8s(&mut self, n: usize) -> Result<Vec<i8>, NnError> {
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }
    fn i32s(&mut self, n: usize) -> Result<Vec<i32>, NnError> {
        let b = self.take(n.checked_mul(4).ok_or(NnError::TruncatedFile { offset: self.pos })?)?;
        Ok(b.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn qparams(&mut self) -> Result<(f32, QuantParams, QuantParams), NnError> {
        let w_scale = self.f32()?;
        let input = QuantParams {
            scale: self.f32()?,
            zero_point: self.i8()?,
        };
        let output = QuantParams {
            scale: self.f32()?,
            zero_point: self.i8()?,
        };
        Ok((w_scale, input, output))
    }
}

pub fn decode(bytes: &[u8]) -> Result<AnyModel, NnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = r.u16()? as u16;
    if version != VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 && dtype != DTYPE_I8 {
        return Err(NnError::ModelInvalid(format!("unknown dtype {dtype}")));
    }
    let count = r.u8()? as usize;

    let model = if dtype == DTYPE_F32 {
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            layers.push(match r.u8()? {
                T_CONV => {
                    let (i, o, k, s) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
                    let weights = r.f32s(o * i * k)?;
                    let bias = r.f32s(o)?;
                    Layer::Conv1d(Conv1dLayer {
                        in_channels: i,
                        out_channels: o,
                        kernel: k,
                        stride: s,
                        weights,
                        bias,
                    })
                }
                T_FC => {
                    let (i, o) = (r.u16()?, r.u16()?);
                    let weights = r.f32s(o * i)?;
                    let bias = r.f32s(o)?;
                    Layer::Fc(FcLayer {
                        in_features: i,
                        out_features: o,
                        weights,
                        bias,
                    })
                }
                T_MAXPOOL => Layer::MaxPool {
                    kernel: r.u16()?,
                    stride: r.u16()?,
                },
                T_RELU => Layer::Relu,
                T_GAP => Layer::GlobalAvgPool,
                T_SOFTMAX => Layer::Softmax,
                t => return Err(NnError::ModelInvalid(format!("unknown layer type {t}"))),
            });
        }
        Layers::Float(layers)
    } else {
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            layers.push(match r.u8()? {
                T_CONV => {
                    let (i, o, k, s) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
                    let (w_scale, input, output) = r.qparams()?;
                    let weights = r.i8s(o * i * k)?;
                    let bias = r.i32s(o)?;
                    QLayer::Conv1d(QConv1d {
                        in_channels: i,
                        out_channels: o,
                        kernel: k,
                        stride: s,
                        w_scale,
                        input,
                        output,
                        weights,
                        bias,
                    })
                }
                T_FC => {
                    let (i, o) = (r.u16()?, r.u16()?);
                    let (w_scale, input, output) = r.qparams()?;
                    let weights = r.i8s(o * i)?;
                    let bias = r.i32s(o)?;
                    QLayer::Fc(QFc {
                        in_features: i,
                        out_features: o,
                        w_scale,
                        input,
                        output,
                        weights,
                        bias,
                    })
                }
                T_MAXPOOL => QLayer::MaxPool {
                    kernel: r.u16()?,
                    stride: r.u16()?,
                },
                T_RELU => QLayer::Relu,
                T_GAP => QLayer::GlobalAvgPool,
                T_SOFTMAX => QLayer::Softmax,
                t => return Err(NnError::ModelInvalid(format!("unknown layer type {t}"))),
            });
        }
        Layers::Int8(layers)
    };

    let body_end = r.pos;
    let stored = r.u8()?;
    let computed = crc8_maxim(&bytes[..body_end]);
    if stored != computed {
        return Err(NnError::ChecksumMismatch { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(NnError::ModelInvalid(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    Ok(match model {
        Layers::Float(l) => AnyModel::Float(Model::new(l)?),
        Layers::Int8(l) => AnyModel::Int8(QuantModel::new(l)?),
    })
}

enum Layers {
    Float(Vec<Layer>),
    Int8(Vec<QLayer>),
}

pub fn save_model(model: &AnyModel, path: &Path) -> Result<(), NnError> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<AnyModel, NnError> {
    decode(&fs::read(path)?)
}
