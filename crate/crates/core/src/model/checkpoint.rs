use std::path::Path;

use sha2::{Digest, Sha256};

use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::{PromptSet, ViTConfig, ViTParams};

const CONFIG_TENSOR: &str = "__config__";
const PROMPT_TENSOR: &str = "prompts";

fn to_named<T: Scalar>(params: &ViTParams<T>) -> Result<Vec<NamedTensor>> {
    let mut out = vec![NamedTensor::json(CONFIG_TENSOR, &serde_json::to_string(&params.config)?)];
    for (name, t) in params.named() {
        out.push(NamedTensor::new(name, t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

/// Serialized checkpoint bytes; the basis of [`checkpoint_hash`].
pub fn checkpoint_bytes<T: Scalar>(params: &ViTParams<T>) -> Result<Vec<u8>> {
    container::encode(&to_named(params)?)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash<T: Scalar>(params: &ViTParams<T>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint_bytes(params)?)))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ViTParams<T>) -> Result<()> {
    container::write_file(path, &to_named(params)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ViTParams<T>> {
    let tensors = container::read_file(path)?;
    let config: ViTConfig = serde_json::from_str(&container::find(&tensors, CONFIG_TENSOR, path)?.as_json()?)
        .map_err(|e| Error::format(path, format!("bad {CONFIG_TENSOR}: {e}")))?;
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = ViTParams::<T>::init(&config)?;
    let expected = params.named().len() + 1;
    if tensors.len() != expected {
        return Err(Error::format(path, format!("expected {expected} tensors, found {}", tensors.len())));
    }
    for (name, slot) in params.named_mut() {
        let t = container::find(&tensors, &name, path)?;
        if t.shape != slot.shape() {
            return Err(Error::format(path, format!("{name}: shape {:?}, expected {:?}", t.shape, slot.shape())));
        }
        for (dst, &src) in slot.data_mut().iter_mut().zip(&t.data) {
            *dst = T::lit(src);
        }
        if !slot.is_finite() {
            return Err(Error::format(path, format!("{name}: non-finite values")));
        }
    }
    Ok(params)
}

pub fn save_prompts<T: Scalar>(path: &Path, prompts: &PromptSet<T>) -> Result<()> {
    let t = prompts.tokens();
    let data = t.data().iter().map(|v| v.as_f64()).collect();
    container::write_file(path, &[NamedTensor::new(PROMPT_TENSOR, t.shape().to_vec(), data)])
}

pub fn load_prompts<T: Scalar>(path: &Path) -> Result<PromptSet<T>> {
    let tensors = container::read_file(path)?;
    let t = container::find(&tensors, PROMPT_TENSOR, path)?;
    let tokens = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| T::lit(v)).collect())
        .map_err(|e| Error::format(path, e.to_string()))?;
    PromptSet::new(tokens).map_err(|e| Error::format(path, e.to_string()))
}
