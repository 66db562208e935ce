use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, pooled_len, Conv1dLayer, FcLayer, Tensor};
use super::NnError;
use crate::bridge::Window;

pub const REFERENCE_INPUT_LEN: usize = 3840;
pub const CLASS_COUNT: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d(Conv1dLayer),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Fc(FcLayer),
    Softmax,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv1d(c) => c.param_count(),
            Layer::Fc(f) => f.param_count(),
            _ => 0,
        }
    }
}

/// Which known topology a layer list matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// conv(1→16,k16,s16) relu conv(16→16,k3) relu conv(16→32,k3) relu
    /// maxpool(2,2) gap fc(32→7) softmax, over 3840 inputs.
    Reference,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelMeta {
    pub architecture: Architecture,
    /// Fixed input length, when the architecture defines one.
    pub input_len: Option<usize>,
    pub class_count: usize,
}

/// Dimension-only view of a layer, shared by the float and int8 models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSig {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Gap,
    Fc {
        in_f: usize,
        out_f: usize,
    },
    Softmax,
}

pub const REFERENCE_SIGNATURE: [LayerSig; 10] = [
    LayerSig::Conv {
        in_ch: 1,
        out_ch: 16,
        kernel: 16,
        stride: 16,
    },
    LayerSig::Relu,
    LayerSig::Conv {
        in_ch: 16,
        out_ch: 16,
        kernel: 3,
        stride: 1,
    },
    LayerSig::Relu,
    LayerSig::Conv {
        in_ch: 16,
        out_ch: 32,
        kernel: 3,
        stride: 1,
    },
    LayerSig::Relu,
    LayerSig::MaxPool { kernel: 2, stride: 2 },
    LayerSig::Gap,
    LayerSig::Fc {
        in_f: 32,
        out_f: CLASS_COUNT,
    },
    LayerSig::Softmax,
];

impl Layer {
    pub fn signature(&self) -> LayerSig {
        match self {
            Layer::Conv1d(c) => LayerSig::Conv {
                in_ch: c.in_channels,
                out_ch: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            },
            Layer::Relu => LayerSig::Relu,
            Layer::MaxPool { kernel, stride } => LayerSig::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::GlobalAvgPool => LayerSig::Gap,
            Layer::Fc(f) => LayerSig::Fc {
                in_f: f.in_features,
                out_f: f.out_features,
            },
            Layer::Softmax => LayerSig::Softmax,
        }
    }

    fn validate_params(&self) -> Result<(), NnError> {
        match self {
            Layer::Conv1d(c) => c.validate(),
            Layer::Fc(f) => f.validate(),
            _ => Ok(()),
        }
    }
}

/// Validated, immutable float model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    meta: ModelMeta,
}

impl Model {
    /// Checks that the list starts from a single input channel, that
    /// adjacent layers compose and that it ends in `fc` then `softmax`.
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        for l in &layers {
            l.validate_params()?;
        }
        let sigs: Vec<LayerSig> = layers.iter().map(Layer::signature).collect();
        let meta = structural_check(&sigs)?;
        Ok(Self { layers, meta })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn meta(&self) -> ModelMeta {
        self.meta
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn signature(&self) -> Vec<LayerSig> {
        self.layers.iter().map(Layer::signature).collect()
    }

    pub fn shape_chain(&self, input_len: usize) -> Result<Vec<(usize, usize)>, NnError> {
        shape_chain(&self.signature(), input_len)
    }

    pub fn check_input(&self, input_len: usize) -> Result<(), NnError> {
        check_input(&self.meta, &self.signature(), input_len)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = apply_layer(layer, cur)?;
        }
        Ok(cur)
    }

    /// Output of every layer, in order.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = apply_layer(layer, cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Reference topology with He-uniform weights from `seed`.
    pub fn reference_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |i: usize, o: usize, k: usize, s: usize| {
            let fan_in = (i * k) as f32;
            let wb = (6.0 / fan_in).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            Layer::Conv1d(Conv1dLayer {
                in_channels: i,
                out_channels: o,
                kernel: k,
                stride: s,
                weights: (0..o * i * k).map(|_| rng.random_range(-wb..wb)).collect(),
                bias: (0..o).map(|_| rng.random_range(-bb..bb)).collect(),
            })
        };
        let layers = vec![
            conv(1, 16, 16, 16),
            Layer::Relu,
            conv(16, 16, 3, 1),
            Layer::Relu,
            conv(16, 32, 3, 1),
            Layer::Relu,
            Layer::MaxPool { kernel: 2, stride: 2 },
            Layer::GlobalAvgPool,
        ];
        let bound = 1.0 / (32f32).sqrt();
        let fc = Layer::Fc(FcLayer {
            in_features: 32,
            out_features: CLASS_COUNT,
            weights: (0..32 * CLASS_COUNT).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: (0..CLASS_COUNT).map(|_| rng.random_range(-bound..bound)).collect(),
        });
        let mut layers = layers;
        layers.push(fc);
        layers.push(Layer::Softmax);
        Self::new(layers).expect("reference topology is valid")
    }
}

pub(crate) fn apply_layer(layer: &Layer, x: Tensor) -> Result<Tensor, NnError> {
    Ok(match layer {
        Layer::Conv1d(c) => ops::conv1d(&x, c)?,
        Layer::Relu => {
            let mut x = x;
            ops::relu_in_place(&mut x);
            x
        }
        Layer::MaxPool { kernel, stride } => ops::maxpool1d(&x, *kernel, *stride)?,
        Layer::GlobalAvgPool => ops::global_avg_pool(&x)?,
        Layer::Fc(f) => ops::fully_connected(&x, f)?,
        Layer::Softmax => {
            if x.len != 1 {
                return Err(NnError::ShapeMismatch("softmax expects a vector".into()));
            }
            Tensor::from_vec(ops::softmax(&x.data))
        }
    })
}

/// Checks that the layers start from one input channel, compose, and end
/// in `fc` then `softmax`. Recognizes the reference topology.
pub fn structural_check(sigs: &[LayerSig]) -> Result<ModelMeta, NnError> {
    let invalid = |m: String| Err(NnError::ModelInvalid(m));
    // channel count, and whether the temporal axis has been collapsed
    let mut channels = 1usize;
    let mut flat = false;
    let n = sigs.len();
    if n < 2 {
        return invalid("model needs at least fc and softmax".into());
    }
    for (i, sig) in sigs.iter().enumerate() {
        match *sig {
            LayerSig::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                if flat {
                    return invalid(format!("layer {i}: conv1d after the temporal axis was pooled away"));
                }
                if in_ch != channels {
                    return invalid(format!(
                        "layer {i}: conv1d expects {in_ch} channels, receives {channels}"
                    ));
                }
                if out_ch == 0 || kernel == 0 || stride == 0 {
                    return invalid(format!("layer {i}: conv1d dimensions must be positive"));
                }
                channels = out_ch;
            }
            LayerSig::Relu => {}
            LayerSig::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return invalid(format!("layer {i}: maxpool kernel/stride must be positive"));
                }
                if flat {
                    return invalid(format!("layer {i}: maxpool after global pooling"));
                }
            }
            LayerSig::Gap => {
                if flat {
                    return invalid(format!("layer {i}: repeated global pooling"));
                }
                flat = true;
            }
            LayerSig::Fc { in_f, out_f } => {
                if !flat {
                    return invalid(format!("layer {i}: fc before global pooling"));
                }
                if in_f != channels {
                    return invalid(format!("layer {i}: fc expects {in_f} features, receives {channels}"));
                }
                if out_f == 0 {
                    return invalid(format!("layer {i}: fc needs outputs"));
                }
                channels = out_f;
            }
            LayerSig::Softmax => {
                if i != n - 1 {
                    return invalid(format!("layer {i}: softmax must be last"));
                }
            }
        }
    }
    if sigs[n - 1] != LayerSig::Softmax || !matches!(sigs[n - 2], LayerSig::Fc { .. }) {
        return invalid("model must end with fc then softmax".into());
    }
    let reference = sigs == REFERENCE_SIGNATURE;
    Ok(ModelMeta {
        architecture: if reference {
            Architecture::Reference
        } else {
            Architecture::Custom
        },
        input_len: reference.then_some(REFERENCE_INPUT_LEN),
        class_count: channels,
    })
}

/// Shapes after each layer for an input of `input_len` samples.
pub fn shape_chain(sigs: &[LayerSig], input_len: usize) -> Result<Vec<(usize, usize)>, NnError> {
    let mut shape = (1usize, input_len);
    let mut out = Vec::with_capacity(sigs.len());
    for sig in sigs {
        shape = match *sig {
            LayerSig::Conv {
                out_ch, kernel, stride, ..
            } => (
                out_ch,
                pooled_len(shape.1, kernel, stride)
                    .ok_or_else(|| NnError::ShapeMismatch(format!("conv1d on length {} < kernel {kernel}", shape.1)))?,
            ),
            LayerSig::MaxPool { kernel, stride } => (
                shape.0,
                pooled_len(shape.1, kernel, stride).ok_or_else(|| {
                    NnError::ShapeMismatch(format!("maxpool on length {} < kernel {kernel}", shape.1))
                })?,
            ),
            LayerSig::Gap => (shape.0, 1),
            LayerSig::Fc { out_f, .. } => (out_f, 1),
            LayerSig::Relu | LayerSig::Softmax => shape,
        };
        out.push(shape);
    }
    Ok(out)
}

/// Fails unless `input_len` is what the model declares (if anything) and
/// composes through every layer.
pub fn check_input(meta: &ModelMeta, sigs: &[LayerSig], input_len: usize) -> Result<(), NnError> {
    if let Some(expected) = meta.input_len {
        if expected != input_len {
            return Err(NnError::ShapeMismatch(format!(
                "model expects {expected} inputs, window provides {input_len}"
            )));
        }
    }
    shape_chain(sigs, input_len).map(|_| ())
}
/// Per-window classifier output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    pub label: usize,
    pub inference_duration: Duration,
}

impl Prediction {
    pub(crate) fn from_probs(probabilities: Vec<f32>, started: Instant) -> Self {
        let label = ops::argmax(&probabilities);
        Self {
            probabilities,
            label,
            inference_duration: started.elapsed(),
        }
    }
}

/// Flattens a window time-major into a `1 x (len * channels)` tensor:
/// sample `(t, c)` lands at `channels * t + c`.
pub fn prepare_input(w: &Window) -> Result<Tensor, NnError> {
    if w.samples.len() != w.window_len * w.channel_count {
        return Err(NnError::ShapeMismatch(format!(
            "window holds {} samples, geometry says {}x{}",
            w.samples.len(),
            w.window_len,
            w.channel_count
        )));
    }
    Ok(Tensor {
        channels: 1,
        len: w.samples.len(),
        data: w.samples.iter().map(|&s| s as f32).collect(),
    })
}

pub fn infer(model: &Model, w: &Window) -> Result<Prediction, NnError> {
    let started = Instant::now();
    let x = prepare_input(w)?;
    model.check_input(x.len)?;
    let probs = model.forward(&x)?;
    Ok(Prediction::from_probs(probs.data, started))
}
