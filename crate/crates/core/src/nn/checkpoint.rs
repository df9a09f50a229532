//! Checkpoints: a safetensors weight file keyed by layer path plus a JSON
//! sidecar with the same basename.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use super::unet::{UNet, UNetSpec};
use super::Real;
use crate::error::{Error, Result};
use crate::trainer::{EpochRecord, TrainConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub spec: UNetSpec,
    pub dtype: String,
    pub epoch: usize,
    pub seed: Option<u64>,
    pub train_config: Option<TrainConfig>,
    pub adam: Option<AdamConfig>,
    #[serde(default)]
    pub loss_history: Vec<EpochRecord>,
}

impl CheckpointMetadata {
    pub fn for_model<T: Real>(model: &UNet<T>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: model.spec().clone(),
            dtype: format!("{:?}", T::DTYPE),
            epoch: 0,
            seed: None,
            train_config: None,
            adam: None,
            loss_history: Vec::new(),
        }
    }
}

/// `(weights, metadata)` paths for a checkpoint basename. A trailing
/// `.safetensors` or `.json` extension is ignored.
pub fn checkpoint_paths(base: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let base = base.as_ref();
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("safetensors") | Some("json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("safetensors"), with("json"))
}

pub fn save_checkpoint<T: Real>(
    model: &UNet<T>,
    metadata: &CheckpointMetadata,
    base: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let (weights_path, meta_path) = checkpoint_paths(base);
    if metadata.spec != *model.spec() {
        return Err(Error::checkpoint(&meta_path, "metadata spec does not describe the model"));
    }
    let mut buffers = Vec::new();
    for layer in model.layers() {
        let mut w = Vec::new();
        T::write_le(&model.params()[layer.weight_offset..layer.bias_offset], &mut w);
        let mut b = Vec::new();
        T::write_le(&model.params()[layer.bias_offset..layer.bias_offset + layer.shape.c_out], &mut b);
        buffers.push((format!("{}.weight", layer.name), layer.weight_dims().to_vec(), w));
        buffers.push((format!("{}.bias", layer.name), vec![layer.shape.c_out], b));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(T::DTYPE, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::checkpoint(&weights_path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info: Option<HashMap<String, String>> = Some(HashMap::from([(
        "format_version".to_string(),
        CHECKPOINT_FORMAT_VERSION.to_string(),
    )]));
    let bytes = safetensors::serialize(views, &info)
        .map_err(|e| Error::checkpoint(&weights_path, e.to_string()))?;
    if let Some(dir) = weights_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&weights_path, bytes)?;
    std::fs::write(&meta_path, serde_json::to_vec_pretty(metadata)?)?;
    Ok((weights_path, meta_path))
}

pub fn load_checkpoint<T: Real>(base: impl AsRef<Path>) -> Result<(UNet<T>, CheckpointMetadata)> {
    let (weights_path, meta_path) = checkpoint_paths(base);
    let meta_bytes = std::fs::read(&meta_path)
        .map_err(|e| Error::checkpoint(&meta_path, format!("cannot read metadata: {e}")))?;
    let metadata: CheckpointMetadata = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::checkpoint(&meta_path, format!("malformed metadata: {e}")))?;
    if metadata.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::checkpoint(
            &meta_path,
            format!("unsupported format version {}", metadata.format_version),
        ));
    }
    let mut model = UNet::<T>::zeroed(metadata.spec.clone())
        .map_err(|e| Error::checkpoint(&meta_path, e.to_string()))?;

    let bytes = std::fs::read(&weights_path)
        .map_err(|e| Error::checkpoint(&weights_path, format!("cannot read weights: {e}")))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::checkpoint(&weights_path, format!("corrupt weights: {e}")))?;

    let layers = model.layers().to_vec();
    let expected: usize = layers.len() * 2;
    if tensors.len() != expected {
        return Err(Error::checkpoint(
            &weights_path,
            format!("expected {expected} tensors, found {}", tensors.len()),
        ));
    }
    for layer in &layers {
        for (suffix, shape, start, len) in [
            ("weight", layer.weight_dims().to_vec(), layer.weight_offset, layer.shape.weight_len()),
            ("bias", vec![layer.shape.c_out], layer.bias_offset, layer.shape.c_out),
        ] {
            let name = format!("{}.{suffix}", layer.name);
            let view = tensors
                .tensor(&name)
                .map_err(|_| Error::checkpoint(&weights_path, format!("missing tensor {name}")))?;
            if view.dtype() != T::DTYPE {
                return Err(Error::checkpoint(
                    &weights_path,
                    format!("tensor {name} has dtype {:?}, expected {:?}", view.dtype(), T::DTYPE),
                ));
            }
            if view.shape() != shape.as_slice() {
                return Err(Error::checkpoint(
                    &weights_path,
                    format!("tensor {name} has shape {:?}, spec implies {:?}", view.shape(), shape),
                ));
            }
            model.params_mut()[start..start + len].copy_from_slice(&T::read_le(view.data()));
        }
    }
    Ok((model, metadata))
}
