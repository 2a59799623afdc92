//! Checkpoint serialization.
//!
//! A checkpoint is a single JSON document carrying the format tag, the full
//! model configuration, a hash of the vocabulary the model was trained
//! against, the optimizer step count, and every parameter tensor by its
//! visitor name. Loading rebuilds the model from the stored configuration
//! and refuses anything that does not line up exactly: wrong format tag,
//! missing or unknown tensors, shape disagreements, or a vocabulary hash
//! other than the one expected by the caller.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};

/// Format tag accepted by [`load`].
pub const FORMAT: &str = "model-checkpoint/v1";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    vocab_hash: String,
    step: u64,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Write `model` (with provenance: vocabulary hash and step count) to a
/// JSON file at `path`.
pub fn save(
    model: &Model,
    vocab_hash: &str,
    step: u64,
    path: &Path,
) -> Result<(), ModelError> {
    let mut tensors = BTreeMap::new();
    for (name, t) in model.params() {
        let (rows, cols) = t.shape();
        tensors.insert(
            name,
            TensorRecord {
                rows,
                cols,
                data: t.v.iter().copied().collect(),
            },
        );
    }
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        step,
        tensors,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Read a checkpoint. `expected_vocab_hash`, when given, must match the
/// stored hash — a model is meaningless against a different vocabulary.
/// Returns the model and its step count.
pub fn load(path: &Path, expected_vocab_hash: Option<&str>) -> Result<(Model, u64), ModelError> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != FORMAT {
        return Err(ModelError::Version {
            found: file.format,
            expected: FORMAT.to_string(),
        });
    }
    if let Some(expected) = expected_vocab_hash {
        if file.vocab_hash != expected {
            return Err(ModelError::VocabMismatch {
                found: file.vocab_hash,
                expected: expected.to_string(),
            });
        }
    }
    let mut model = Model::new(file.config)?;
    let mut used = 0usize;
    for (name, t) in model.params_mut() {
        let record = file
            .tensors
            .get(&name)
            .ok_or(ModelError::MissingTensor { name: name.clone() })?;
        let (rows, cols) = t.shape();
        if (record.rows, record.cols) != (rows, cols) || record.data.len() != rows * cols {
            return Err(ModelError::TensorShape {
                name,
                found: (record.rows, record.cols),
                expected: (rows, cols),
            });
        }
        t.v = Array2::from_shape_vec((rows, cols), record.data.clone())
            .expect("length checked above");
        used += 1;
    }
    if used != file.tensors.len() {
        let known: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
        let unknown = file
            .tensors
            .keys()
            .find(|k| !known.contains(k))
            .expect("count mismatch implies an extra tensor")
            .clone();
        return Err(ModelError::UnknownTensor { name: unknown });
    }
    Ok((model, file.step))
}

/// Stored vocabulary hash and step, without materializing the model.
pub fn inspect(path: &Path) -> Result<(ModelConfig, String, u64), ModelError> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != FORMAT {
        return Err(ModelError::Version {
            found: file.format,
            expected: FORMAT.to_string(),
        });
    }
    Ok((file.config, file.vocab_hash, file.step))
}
