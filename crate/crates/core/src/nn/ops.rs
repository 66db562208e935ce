//! Float layer kernels. Summation order is fixed so results are
//! bit-reproducible: conv and fc accumulate over (input channel, tap) in
//! ascending order starting from zero and add the bias last.

use super::NnError;

/// Channel-major activation tensor: `data[c * len + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, len: usize, data: Vec<f32>) -> Result<Self, NnError> {
        if data.len() != channels * len {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for a {channels}x{len} tensor",
                data.len()
            )));
        }
        Ok(Self { channels, len, data })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            channels: data.len(),
            len: 1,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.len)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn get(&self, c: usize, i: usize) -> f32 {
        self.data[c * self.len + i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out][in][tap]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv1dLayer {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(NnError::ModelInvalid("conv1d dimensions must be positive".into()));
        }
        if self.weights.len() != self.out_channels * self.in_channels * self.kernel
            || self.bias.len() != self.out_channels
        {
            return Err(NnError::ModelInvalid(
                "conv1d parameter count does not match shape".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        pooled_len(len, self.kernel, self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FcLayer {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(NnError::ModelInvalid("fc dimensions must be positive".into()));
        }
        if self.weights.len() != self.in_features * self.out_features || self.bias.len() != self.out_features {
            return Err(NnError::ModelInvalid("fc parameter count does not match shape".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// `floor((len - kernel) / stride) + 1`, or `None` when `len < kernel`.
pub fn pooled_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel && stride > 0).then(|| (len - kernel) / stride + 1)
}

/// Valid (unpadded) strided cross-correlation.
pub fn conv1d(x: &Tensor, layer: &Conv1dLayer) -> Result<Tensor, NnError> {
    if x.channels != layer.in_channels {
        return Err(NnError::ShapeMismatch(format!(
            "conv1d expects {} input channels, got {}",
            layer.in_channels, x.channels
        )));
    }
    let out_len = layer
        .out_len(x.len)
        .ok_or_else(|| NnError::ShapeMismatch(format!("conv1d input length {} < kernel {}", x.len, layer.kernel)))?;
    let k = layer.kernel;
    let mut out = Tensor::zeros(layer.out_channels, out_len);
    for oc in 0..layer.out_channels {
        let w_oc = &layer.weights[oc * layer.in_channels * k..(oc + 1) * layer.in_channels * k];
        let dst = &mut out.data[oc * out_len..(oc + 1) * out_len];
        for (i, y) in dst.iter_mut().enumerate() {
            let start = i * layer.stride;
            let mut acc = 0f32;
            for ic in 0..layer.in_channels {
                let xs = &x.data[ic * x.len + start..ic * x.len + start + k];
                let ws = &w_oc[ic * k..(ic + 1) * k];
                for (xv, wv) in xs.iter().zip(ws) {
                    acc += xv * wv;
                }
            }
            *y = acc + layer.bias[oc];
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

pub fn relu_in_place(x: &mut Tensor) {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
}

/// Per-channel windowed max; a trailing partial window is dropped.
pub fn maxpool1d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor, NnError> {
    let out_len = pooled_len(x.len, kernel, stride)
        .ok_or_else(|| NnError::ShapeMismatch(format!("maxpool input length {} < kernel {kernel}", x.len)))?;
    let mut out = Tensor::zeros(x.channels, out_len);
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..out_len {
            let win = &src[i * stride..i * stride + kernel];
            out.data[c * out_len + i] = win.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        }
    }
    Ok(out)
}

/// Per-channel mean, `C x L -> C x 1`. Sums in f64.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, NnError> {
    if x.len == 0 {
        return Err(NnError::ShapeMismatch("global average pool over empty length".into()));
    }
    let data = (0..x.channels)
        .map(|c| (x.channel(c).iter().map(|&v| v as f64).sum::<f64>() / x.len as f64) as f32)
        .collect();
    Ok(Tensor {
        channels: x.channels,
        len: 1,
        data,
    })
}

/// `y = W x + b` over a `C x 1` tensor.
pub fn fully_connected(x: &Tensor, layer: &FcLayer) -> Result<Tensor, NnError> {
    if x.len != 1 || x.channels != layer.in_features {
        return Err(NnError::ShapeMismatch(format!(
            "fc expects {}x1, got {}x{}",
            layer.in_features, x.channels, x.len
        )));
    }
    let data = (0..layer.out_features)
        .map(|o| {
            let row = &layer.weights[o * layer.in_features..(o + 1) * layer.in_features];
            let mut acc = 0f32;
            for (w, v) in row.iter().zip(&x.data) {
                acc += w * v;
            }
            acc + layer.bias[o]
        })
        .collect();
    Ok(Tensor {
        channels: layer.out_features,
        len: 1,
        data,
    })
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
