//! Post-training int8 quantization.
//!
//! Weights are quantized per tensor and symmetrically (`zero_point = 0`,
//! `scale = max|w| / 127`). Activations use affine params fitted to the
//! min/max observed on calibration windows, widened to contain zero. Where a
//! conv/fc is followed by ReLU, its output params are fitted to the
//! post-ReLU range. Biases are stored as i32 at `in_scale * w_scale`.
//!
//! Inference runs conv/fc with i32 accumulators and requantizes between
//! layers. The fc feeding softmax is not requantized: its accumulators are
//! scaled straight to float logits.

use std::time::Instant;

use super::model::{check_input, prepare_input, structural_check, Layer, LayerSig, Model, ModelMeta, Prediction};
use super::ops::{pooled_len, softmax, Tensor};
use super::NnError;
use crate::bridge::Window;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

/// Rounds half away from zero and saturates to i8.
pub fn saturate_i8(v: f64) -> i8 {
    v.round().clamp(i8::MIN as f64, i8::MAX as f64) as i8
}

impl QuantParams {
    /// Affine params covering `[min, max] ∪ {0}` over the full i8 range.
    pub fn from_range(min: f32, max: f32) -> Self {
        let lo = min.min(0.0) as f64;
        let hi = max.max(0.0) as f64;
        if hi - lo <= 0.0 || !(hi - lo).is_finite() {
            return Self {
                scale: 1.0,
                zero_point: 0,
            };
        }
        let scale = ((hi - lo) / 255.0) as f32;
        let zp = (-128.0 - lo / scale as f64).round().clamp(-128.0, 127.0) as i8;
        Self { scale, zero_point: zp }
    }

    pub fn quantize(&self, x: f32) -> i8 {
        saturate_i8(x as f64 / self.scale as f64 + self.zero_point as f64)
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        ((q as i32 - self.zero_point as i32) as f64 * self.scale as f64) as f32
    }
}

/// Symmetric per-tensor weight quantization. An all-zero tensor gets scale
/// 1.0.
pub fn quantize_weights(w: &[f32]) -> (f32, Vec<i8>) {
    let max_abs = w.iter().fold(0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
    let q = w.iter().map(|&v| saturate_i8(v as f64 / scale as f64)).collect();
    (scale, q)
}

fn quantize_bias(b: &[f32], scale: f64) -> Vec<i32> {
    b.iter()
        .map(|&v| (v as f64 / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QConv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub w_scale: f32,
    pub input: QuantParams,
    pub output: QuantParams,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFc {
    pub in_features: usize,
    pub out_features: usize,
    pub w_scale: f32,
    pub input: QuantParams,
    pub output: QuantParams,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QLayer {
    Conv1d(QConv1d),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Fc(QFc),
    Softmax,
}

impl QLayer {
    pub fn signature(&self) -> LayerSig {
        match self {
            QLayer::Conv1d(c) => LayerSig::Conv {
                in_ch: c.in_channels,
                out_ch: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            },
            QLayer::Relu => LayerSig::Relu,
            QLayer::MaxPool { kernel, stride } => LayerSig::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            QLayer::GlobalAvgPool => LayerSig::Gap,
            QLayer::Fc(f) => LayerSig::Fc {
                in_f: f.in_features,
                out_f: f.out_features,
            },
            QLayer::Softmax => LayerSig::Softmax,
        }
    }

    fn params(&self) -> Option<(QuantParams, QuantParams, f32, usize, usize)> {
        match self {
            QLayer::Conv1d(c) => Some((c.input, c.output, c.w_scale, c.weights.len(), c.bias.len())),
            QLayer::Fc(f) => Some((f.input, f.output, f.w_scale, f.weights.len(), f.bias.len())),
            _ => None,
        }
    }
}

/// Validated int8 model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    layers: Vec<QLayer>,
    meta: ModelMeta,
}

impl QuantModel {
    /// Validates topology, parameter sizes, scales, and that each layer's
    /// input params equal the params of the tensor feeding it.
    pub fn new(layers: Vec<QLayer>) -> Result<Self, NnError> {
        let sigs: Vec<LayerSig> = layers.iter().map(QLayer::signature).collect();
        let meta = structural_check(&sigs)?;
        let mut current: Option<QuantParams> = None;
        for (i, (l, sig)) in layers.iter().zip(&sigs).enumerate() {
            let Some((input, output, w_scale, nw, nb)) = l.params() else {
                continue;
            };
            let (expect_w, expect_b) = match *sig {
                LayerSig::Conv {
                    in_ch, out_ch, kernel, ..
                } => (in_ch * out_ch * kernel, out_ch),
                LayerSig::Fc { in_f, out_f } => (in_f * out_f, out_f),
                _ => unreachable!(),
            };
            if nw != expect_w || nb != expect_b {
                return Err(NnError::ModelInvalid(format!(
                    "layer {i}: parameter count does not match shape"
                )));
            }
            for s in [input.scale, output.scale, w_scale] {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(NnError::ModelInvalid(format!(
                        "layer {i}: scales must be positive and finite"
                    )));
                }
            }
            if let Some(cur) = current {
                if cur != input {
                    return Err(NnError::ModelInvalid(format!(
                        "layer {i}: input params {input:?} differ from producer params {cur:?}"
                    )));
                }
            }
            current = Some(output);
        }
        if current.is_none() {
            return Err(NnError::ModelInvalid("quantized model has no parametric layers".into()));
        }
        Ok(Self { layers, meta })
    }

    pub fn layers(&self) -> &[QLayer] {
        &self.layers
    }

    pub fn meta(&self) -> ModelMeta {
        self.meta
    }

    pub fn signature(&self) -> Vec<LayerSig> {
        self.layers.iter().map(QLayer::signature).collect()
    }

    /// Quant params of the network input.
    pub fn input_params(&self) -> QuantParams {
        self.layers
            .iter()
            .find_map(|l| l.params().map(|p| p.0))
            .expect("validated model has a parametric layer")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params().map(|p| p.3 + p.4)).sum()
    }

    /// Runs the integer pipeline and returns the dequantized logits.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>, NnError> {
        let mut params = self.input_params();
        let mut q = QTensor {
            channels: x.channels,
            len: x.len,
            data: x.data.iter().map(|&v| params.quantize(v)).collect(),
        };
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                QLayer::Fc(f) if self.layers.get(i + 1) == Some(&QLayer::Softmax) && i + 2 == n => {
                    return qfc_accumulators(&q, f).map(|acc| {
                        let s = f.input.scale as f64 * f.w_scale as f64;
                        acc.into_iter().map(|a| (a as f64 * s) as f32).collect()
                    });
                }
                QLayer::Conv1d(c) => {
                    q = qconv1d(&q, c)?;
                    params = c.output;
                }
                QLayer::Relu => {
                    let zp = params.zero_point;
                    for v in &mut q.data {
                        *v = (*v).max(zp);
                    }
                }
                QLayer::MaxPool { kernel, stride } => q = qmaxpool(&q, *kernel, *stride)?,
                QLayer::GlobalAvgPool => q = qgap(&q),
                QLayer::Fc(f) => {
                    q = qfc(&q, f)?;
                    params = f.output;
                }
                QLayer::Softmax => {}
            }
        }
        Ok(q.data.iter().map(|&v| params.dequantize(v)).collect())
    }
}

#[derive(Debug, Clone)]
struct QTensor {
    channels: usize,
    len: usize,
    data: Vec<i8>,
}

fn requantize(acc: i32, multiplier: f64, out_zp: i8) -> i8 {
    saturate_i8(acc as f64 * multiplier + out_zp as f64)
}

fn qconv1d(x: &QTensor, c: &QConv1d) -> Result<QTensor, NnError> {
    if x.channels != c.in_channels {
        return Err(NnError::ShapeMismatch(format!(
            "conv1d expects {} channels, got {}",
            c.in_channels, x.channels
        )));
    }
    let out_len = pooled_len(x.len, c.kernel, c.stride)
        .ok_or_else(|| NnError::ShapeMismatch(format!("conv1d input length {} < kernel {}", x.len, c.kernel)))?;
    let multiplier = c.w_scale as f64 * c.input.scale as f64 / c.output.scale as f64;
    let in_zp = c.input.zero_point as i32;
    let k = c.kernel;
    let mut data = vec![0i8; c.out_channels * out_len];
    for oc in 0..c.out_channels {
        let w_oc = &c.weights[oc * c.in_channels * k..(oc + 1) * c.in_channels * k];
        for i in 0..out_len {
            let start = i * c.stride;
            let mut acc = c.bias[oc];
            for ic in 0..c.in_channels {
                let xs = &x.data[ic * x.len + start..ic * x.len + start + k];
                let ws = &w_oc[ic * k..(ic + 1) * k];
                for (&xv, &wv) in xs.iter().zip(ws) {
                    acc = acc.wrapping_add((xv as i32 - in_zp) * wv as i32);
                }
            }
            data[oc * out_len + i] = requantize(acc, multiplier, c.output.zero_point);
        }
    }
    Ok(QTensor {
        channels: c.out_channels,
        len: out_len,
        data,
    })
}

fn qmaxpool(x: &QTensor, kernel: usize, stride: usize) -> Result<QTensor, NnError> {
    let out_len = pooled_len(x.len, kernel, stride)
        .ok_or_else(|| NnError::ShapeMismatch(format!("maxpool input length {} < kernel {kernel}", x.len)))?;
    let mut data = Vec::with_capacity(x.channels * out_len);
    for ch in 0..x.channels {
        let src = &x.data[ch * x.len..(ch + 1) * x.len];
        data.extend((0..out_len).map(|i| *src[i * stride..i * stride + kernel].iter().max().unwrap()));
    }
    Ok(QTensor {
        channels: x.channels,
        len: out_len,
        data,
    })
}

/// Mean of the codes; the affine map commutes with averaging so params are
/// unchanged.
fn qgap(x: &QTensor) -> QTensor {
    let data = (0..x.channels)
        .map(|ch| {
            let sum: i64 = x.data[ch * x.len..(ch + 1) * x.len].iter().map(|&v| v as i64).sum();
            saturate_i8(sum as f64 / x.len as f64)
        })
        .collect();
    QTensor {
        channels: x.channels,
        len: 1,
        data,
    }
}

fn qfc_accumulators(x: &QTensor, f: &QFc) -> Result<Vec<i32>, NnError> {
    if x.len != 1 || x.channels != f.in_features {
        return Err(NnError::ShapeMismatch(format!(
            "fc expects {}x1, got {}x{}",
            f.in_features, x.channels, x.len
        )));
    }
    let in_zp = f.input.zero_point as i32;
    Ok((0..f.out_features)
        .map(|o| {
            let row = &f.weights[o * f.in_features..(o + 1) * f.in_features];
            row.iter().zip(&x.data).fold(f.bias[o], |acc, (&w, &v)| {
                acc.wrapping_add(w as i32 * (v as i32 - in_zp))
            })
        })
        .collect())
}

fn qfc(x: &QTensor, f: &QFc) -> Result<QTensor, NnError> {
    let multiplier = f.w_scale as f64 * f.input.scale as f64 / f.output.scale as f64;
    let data = qfc_accumulators(x, f)?
        .into_iter()
        .map(|acc| requantize(acc, multiplier, f.output.zero_point))
        .collect();
    Ok(QTensor {
        channels: f.out_features,
        len: 1,
        data,
    })
}

#[derive(Debug, Clone, Copy)]
struct Range {
    min: f32,
    max: f32,
}

impl Range {
    fn empty() -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        }
    }

    fn observe(&mut self, t: &Tensor) {
        for &v in &t.data {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn params(&self) -> QuantParams {
        QuantParams::from_range(self.min, self.max)
    }
}

/// Calibrates activation ranges on `calibration` and converts `model` to
/// int8.
pub fn quantize_model(model: &Model, calibration: &[Window]) -> Result<QuantModel, NnError> {
    if calibration.is_empty() {
        return Err(NnError::EmptyCalibration);
    }
    let layers = model.layers();
    let mut input_range = Range::empty();
    let mut ranges = vec![Range::empty(); layers.len()];
    for w in calibration {
        let x = prepare_input(w)?;
        model.check_input(x.len)?;
        input_range.observe(&x);
        for (r, t) in ranges.iter_mut().zip(model.forward_trace(&x)?) {
            r.observe(&t);
        }
    }

    let mut current = input_range.params();
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        // Output params come from the tensor after a directly following ReLU.
        let out_range = if layers.get(i + 1) == Some(&Layer::Relu) {
            ranges[i + 1]
        } else {
            ranges[i]
        };
        let q = match layer {
            Layer::Conv1d(c) => {
                let (w_scale, weights) = quantize_weights(&c.weights);
                let output = out_range.params();
                let q = QLayer::Conv1d(QConv1d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    w_scale,
                    input: current,
                    output,
                    weights,
                    bias: quantize_bias(&c.bias, current.scale as f64 * w_scale as f64),
                });
                current = output;
                q
            }
            Layer::Fc(f) => {
                let (w_scale, weights) = quantize_weights(&f.weights);
                let output = out_range.params();
                let q = QLayer::Fc(QFc {
                    in_features: f.in_features,
                    out_features: f.out_features,
                    w_scale,
                    input: current,
                    output,
                    weights,
                    bias: quantize_bias(&f.bias, current.scale as f64 * w_scale as f64),
                });
                current = output;
                q
            }
            Layer::Relu => QLayer::Relu,
            Layer::MaxPool { kernel, stride } => QLayer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::GlobalAvgPool => QLayer::GlobalAvgPool,
            Layer::Softmax => QLayer::Softmax,
        };
        out.push(q);
    }
    QuantModel::new(out)
}

pub fn infer_quant(model: &QuantModel, w: &Window) -> Result<Prediction, NnError> {
    let started = Instant::now();
    let x = prepare_input(w)?;
    check_input(&model.meta, &model.signature(), x.len)?;
    let logits = model.logits(&x)?;
    Ok(Prediction::from_probs(softmax(&logits), started))
}
