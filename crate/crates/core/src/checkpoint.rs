//! Checkpoints: every parameter in a safetensors file whose metadata carries
//! the run config, the backbone shape and the vocabulary, so a checkpoint
//! restores without any other file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use thiserror::Error;

use crate::config::RunConfig;
use crate::encoder::TransformerConfig;
use crate::model::Extractor;
use crate::tokenizer::Vocab;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    CheckpointVersionMismatch { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

fn malformed(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

fn backbone_config(ex: &Extractor) -> TransformerConfig {
    ex.model.encoder().backbone().config().clone()
}

pub fn save(ex: &Extractor, path: &Path) -> Result<(), CheckpointError> {
    let tensors = ex.store.tensors();
    let mut buffers: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let flat = t.flatten_all()?;
        let (dtype, bytes) = match t.dtype() {
            DType::F64 => (
                Dtype::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            _ => (
                Dtype::F32,
                flat.to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ),
        };
        buffers.push((name.clone(), t.dims().to_vec(), dtype, bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, dtype, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(malformed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let metadata: HashMap<String, String> = [
        ("format_version", FORMAT_VERSION.to_owned()),
        ("config", ex.config.to_json_pretty()),
        ("backbone", serde_json::to_string(&backbone_config(ex)).map_err(malformed)?),
        ("vocab", ex.vocab.tokens().join("\n")),
        ("lowercase", ex.vocab.lowercase().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_owned(),
            source,
        })?;
    }
    safetensors::serialize_to_file(views, &Some(metadata), path).map_err(malformed)
}

pub fn load(path: &Path, device: &Device) -> Result<Extractor, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(malformed)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| malformed("no metadata"))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| malformed(format!("missing `{k}`")));
    let version = get("format_version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::CheckpointVersionMismatch {
            found: version.clone(),
            expected: FORMAT_VERSION.to_owned(),
        });
    }
    let config = RunConfig::from_json(get("config")?).map_err(malformed)?;
    let backbone: TransformerConfig = serde_json::from_str(get("backbone")?).map_err(malformed)?;
    let tokens: Vec<String> = get("vocab")?.split('\n').map(str::to_owned).collect();
    let vocab = Vocab::from_tokens(tokens, get("lowercase")? == "true").map_err(malformed)?;
    let ex = Extractor::new(&config, vocab, backbone, device)?;
    let stored = candle_core::safetensors::load_buffer(&bytes, device)?;
    for (name, _) in ex.store.vars() {
        let t: &Tensor = stored
            .get(&name)
            .ok_or_else(|| malformed(format!("parameter {name} missing")))?;
        ex.store.assign(&name, t)?;
    }
    Ok(ex)
}
