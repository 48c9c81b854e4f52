//! Model checkpoints.
//!
//! Layout (little-endian): magic `FLTM` | version u32 = 1 | layer count u32 |
//! per layer, in order with the classifier last: input_dim u32 | output_dim u32
//! | activation u8 (0 identity, 1 relu) | weights input_dim×output_dim f32
//! row-major | bias output_dim f32.

use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, write_atomic, Reader};
use crate::error::{FormatError, Result};
use crate::nn::{Activation, DenseLayer, MlpModel};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"FLTM";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model(model: &MlpModel<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + model.parameter_count() * 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let layers: Vec<&DenseLayer<f32>> = model.layers().collect();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        out.push(l.activation().code());
        put_f32s(&mut out, l.weights().data());
        put_f32s(&mut out, l.bias().data());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let count = r.u32()? as usize;
    if count < 2 {
        return Err(FormatError::InvalidHeader {
            field: "layer count",
            reason: format!("need a feature layer and a classifier, found {count}"),
        }
        .into());
    }
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let input = r.u32()? as usize;
        let output = r.u32()? as usize;
        let code = r.u8()?;
        let activation = Activation::from_code(code).ok_or_else(|| FormatError::InvalidHeader {
            field: "activation",
            reason: format!("unknown code {code}"),
        })?;
        let weights = r.f32s(input.checked_mul(output).ok_or_else(|| FormatError::InvalidHeader {
            field: "layer dims",
            reason: "overflow".into(),
        })?)?;
        let bias = r.f32s(output)?;
        layers.push(DenseLayer::new(
            Tensor::matrix(input, output, weights)?,
            Tensor::vector(bias),
            activation,
        )?);
    }
    r.finish()?;
    let classifier = layers.pop().expect("count >= 2");
    MlpModel::new(layers, classifier)
}

pub fn save_model(model: &MlpModel<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<MlpModel<f32>> {
    decode_model(&fs::read(path)?)
}
