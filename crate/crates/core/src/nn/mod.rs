//! Compact 1D CNN inference: float kernels, an int8 post-training quantized
//! path and the NEMW weight container.

mod model;
pub mod nemw;
pub mod ops;
pub mod quant;

pub use model::{
    check_input, infer, prepare_input, shape_chain, structural_check, Architecture, Layer, LayerSig, Model, ModelMeta,
    Prediction, CLASS_COUNT, REFERENCE_INPUT_LEN, REFERENCE_SIGNATURE,
};
pub use nemw::{load_model, save_model, AnyModel};
pub use ops::{Conv1dLayer, FcLayer, Tensor};
pub use quant::{infer_quant, quantize_model, QuantModel, QuantParams};

use thiserror::Error;

use crate::bridge::Window;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model: {0}")]
    ModelInvalid(String),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("not a NEMW file")]
    BadMagic,
    #[error("unsupported NEMW version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated at byte {offset}")]
    TruncatedFile { offset: usize },
    #[error("NEMW checksum mismatch: stored {stored:#04x}, computed {computed:#04x}")]
    ChecksumMismatch { stored: u8, computed: u8 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl AnyModel {
    pub fn meta(&self) -> ModelMeta {
        match self {
            AnyModel::Float(m) => m.meta(),
            AnyModel::Int8(m) => m.meta(),
        }
    }

    pub fn check_input(&self, input_len: usize) -> Result<(), NnError> {
        match self {
            AnyModel::Float(m) => m.check_input(input_len),
            AnyModel::Int8(m) => check_input(&m.meta(), &m.signature(), input_len),
        }
    }

    /// Float or integer inference, whichever the model holds.
    pub fn infer(&self, w: &Window) -> Result<Prediction, NnError> {
        match self {
            AnyModel::Float(m) => infer(m, w),
            AnyModel::Int8(m) => infer_quant(m, w),
        }
    }
}
