use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{LccError, Result};
use crate::format::{self, TensorData};

const FORMAT: &str = "lcc-checkpoint";

/// Serializes a model: JSON header (config + tensor manifest) followed by
/// little-endian `f32` tensors in manifest order.
pub fn write_checkpoint(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let meta = serde_json::to_value(&params.config)?;
    let tensors: Vec<_> = params
        .tensors()
        .into_iter()
        .map(|(name, shape, data)| (name, shape, TensorData::F32(data)))
        .collect();
    format::encode(FORMAT, meta, &tensors)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let decoded = format::decode(bytes, FORMAT)?;
    let config: ModelConfig = serde_json::from_value(decoded.header.meta.clone())
        .map_err(|e| LccError::Format(format!("bad model config: {e}")))?;
    config.validate()?;
    let mut params = ModelParams::<f32>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if decoded.header.tensors.len() != expected.len() {
        return Err(LccError::Format(format!(
            "expected {} tensors, found {}",
            expected.len(),
            decoded.header.tensors.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&decoded.header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(LccError::Format(format!(
                "manifest entry `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    for ((name, _), slot) in expected.iter().zip(params.tensors_mut()) {
        *slot = decoded.f32(name)?;
    }
    if !params.all_finite() {
        return Err(LccError::Format("checkpoint contains non-finite values".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    format::write_file(path, &write_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    read_checkpoint(&format::read_file(path)?)
}
