//! Checkpoint serialization.
//!
//! Layout: an 8-byte little-endian `u64` giving the JSON header length,
//! the UTF-8 JSON header itself, then one raw block of little-endian
//! `f64` values per tensor, in the fixed parameter visit order declared by
//! the header. The header carries the configuration, mode, step counter,
//! best validation score, normalization statistics, and the frozen
//! channel-graph adjacency, so a checkpoint reconstructs the model with no
//! other inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Mode, Model, ModelConfig, ModelError, NormStats};
use crate::msek::{ChannelGraph, MsekError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint header: {0}")]
    Header(#[source] serde_json::Error),
    #[error("malformed checkpoint: {reason}")]
    Format { reason: String },
    #[error("tensor {index} is {actual}, expected {expected} per the model layout")]
    TensorOrder { index: usize, expected: String, actual: String },
    #[error("tensor {name} has shape {actual:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("tensor {name} contains a non-finite value")]
    NonFinite { name: String },
    #[error("adjacency has {rows} rows but the model has {d} channels")]
    AdjacencySize { rows: usize, d: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] MsekError),
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    mode: Mode,
    step: u64,
    val_rmse: Option<f64>,
    norm: NormStats,
    adjacency: Vec<String>,
    tensors: Vec<TensorMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Writes the model (plus training progress markers) to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    step: u64,
    val_rmse: Option<f64>,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut blocks: Vec<u8> = Vec::new();
    model.params.visit(&mut |name, t| {
        tensors.push(TensorMeta { name: name.to_string(), shape: model.graph.shape(t).to_vec() });
        for v in model.graph.data(t) {
            blocks.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        config: model.config.clone(),
        mode: model.mode,
        step,
        val_rmse,
        norm: model.norm,
        adjacency: model.channel_graph.to_row_strings(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).map_err(CheckpointError::Header)?;
    let mut bytes = Vec::with_capacity(8 + header_json.len() + blocks.len());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&blocks);
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a checkpoint back into a freshly constructed model. Returns the
/// model together with the stored step counter and validation score.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64, Option<f64>), CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Format { reason: "shorter than the length prefix".into() });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CheckpointError::Format {
            reason: format!(
                "header length {header_len} exceeds the remaining {} bytes",
                bytes.len() - 8
            ),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + header_len]).map_err(CheckpointError::Header)?;

    let mut model = Model::new(header.config, header.mode)?;
    model.norm = header.norm;
    let graph = ChannelGraph::from_row_strings(&header.adjacency)?;
    if graph.node_count() != model.dims().d {
        return Err(CheckpointError::AdjacencySize {
            rows: graph.node_count(),
            d: model.dims().d,
        });
    }
    model.channel_graph = graph;

    let expected = model.params.named();
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::Format {
            reason: format!(
                "{} tensors stored, model has {}",
                header.tensors.len(),
                expected.len()
            ),
        });
    }
    let mut offset = 8 + header_len;
    for (index, (meta, (name, tensor))) in
        header.tensors.iter().zip(expected.iter()).enumerate()
    {
        if meta.name != *name {
            return Err(CheckpointError::TensorOrder {
                index,
                expected: name.clone(),
                actual: meta.name.clone(),
            });
        }
        let shape = model.graph.shape(*tensor).to_vec();
        if meta.shape != shape {
            return Err(CheckpointError::TensorShape {
                name: name.clone(),
                expected: shape,
                actual: meta.shape.clone(),
            });
        }
        let count: usize = shape.iter().product();
        let end = offset + 8 * count;
        if bytes.len() < end {
            return Err(CheckpointError::Format {
                reason: format!("file truncated inside tensor {name}"),
            });
        }
        let values: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite { name: name.clone() });
        }
        model
            .graph
            .leaf_data_mut(*tensor)
            .expect("parameters are leaves")
            .copy_from_slice(&values);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Format {
            reason: format!("{} trailing bytes after the last tensor", bytes.len() - offset),
        });
    }
    Ok((model, header.step, header.val_rmse))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn train_like_scramble(model: &mut Model) {
        // Nudge every parameter so the round trip is tested on non-initial
        // values.
        let mut rng = rng_from_seed(77);
        let named = model.params.named();
        for (_, t) in named {
            for v in model.graph.leaf_data_mut(t).unwrap() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Model::new(tiny_config(40), Mode::MsekOnly).unwrap();
        model.norm = NormStats { ppg_mean: 0.25, ppg_std: 1.5, abp_mean: -0.5, abp_std: 2.0 };
        train_like_scramble(&mut model);
        save_checkpoint(&path, &model, 123, Some(0.456)).unwrap();

        let (loaded, step, val) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 123);
        assert_eq!(val, Some(0.456));
        assert_eq!(loaded.mode, Mode::MsekOnly);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.norm, model.norm);
        assert_eq!(
            loaded.channel_graph.to_row_strings(),
            model.channel_graph.to_row_strings()
        );
        for ((n1, t1), (_, t2)) in model.params.named().iter().zip(loaded.params.named()) {
            assert_eq!(model.graph.data(*t1), loaded.graph.data(t2), "{n1}");
        }

        // Loaded model behaves identically.
        let mut rng = rng_from_seed(41);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m1 = model;
        let mut m2 = loaded;
        let o1 = m1.forward(&x).unwrap();
        let o2 = m2.forward(&x).unwrap();
        assert_eq!(m1.graph.data(o1.x_hat), m2.graph.data(o2.x_hat));
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(tiny_config(42), Mode::CamMsek).unwrap();
        save_checkpoint(&path, &model, 1, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Too short for the prefix.
        std::fs::write(&path, &bytes[..4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format { .. })));
        // Truncated inside the tensor blocks.
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format { .. })));
        // Trailing garbage.
        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format { .. })));
        // Unparseable header.
        let mut broken = bytes.clone();
        broken[9] = b'!';
        std::fs::write(&path, &broken).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Header(_))));
        // A non-finite parameter value.
        let mut poisoned = bytes;
        let tail = poisoned.len() - 8;
        poisoned[tail..].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&path, &poisoned).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::NonFinite { .. })));
    }
}
