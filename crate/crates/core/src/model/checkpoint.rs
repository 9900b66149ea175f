//! Binary checkpoint format.
//!
//! ```text
//! "MCTL"  version:u8  manifest_len:u32le  manifest (UTF-8 TOML)  params
//! ```
//!
//! `params` is every parameter block in network order (dense: `W`, `b`;
//! LSTM: `W_in`, `W_rec`, `b`) as little-endian `f64`, row-major.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{topology, HyperParams, LayerSpec, ModelParams, TrainingMeta};
use crate::nn::{DenseLayerParams, LayerParams, LstmLayerParams, Matrix, Network};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCTL";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest field `{field}`: {reason}")]
    Inconsistent { field: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    parameter_count: usize,
    hyper: HyperParams,
    meta: TrainingMeta,
    #[serde(rename = "layer")]
    layers: Vec<LayerSpec>,
}

pub fn save<W: Write>(model: &ModelParams, mut out: W) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        seed: model.seed,
        parameter_count: model.network.parameter_count(),
        hyper: model.hyper,
        meta: model.meta.clone(),
        layers: model.topology(),
    };
    let text = toml::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    out.write_all(&(text.len() as u32).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    let mut buf = Vec::with_capacity(manifest.parameter_count * 8);
    for block in model.network.blocks() {
        for v in block.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(format!("while reading {what}")),
        _ => CheckpointError::Io(e),
    })
}

struct Floats<'a> {
    bytes: &'a [u8],
}

impl Floats<'_> {
    fn take(&mut self, n: usize) -> Vec<f64> {
        let (head, rest) = self.bytes.split_at(n * 8);
        self.bytes = rest;
        head.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.take(rows * cols)).expect("length matches")
    }
}

fn expected_count(layers: &[LayerSpec]) -> usize {
    layers
        .windows(2)
        .map(|p| match p[1].kind {
            super::LayerKind::Lstm => (p[0].width + p[1].width + 1) * 4 * p[1].width,
            _ => (p[0].width + 1) * p[1].width,
        })
        .sum()
}

pub fn load<R: Read>(mut input: R) -> Result<ModelParams, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut version = [0u8; 1];
    read_exact(&mut input, &mut version, "version")?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version[0]));
    }
    let mut len = [0u8; 4];
    read_exact(&mut input, &mut len, "manifest length")?;
    let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut input, &mut text, "manifest")?;
    let text = String::from_utf8(text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let plan = topology(&manifest.hyper).map_err(|e| CheckpointError::Inconsistent {
        field: "hyper",
        reason: e.to_string(),
    })?;
    if plan != manifest.layers {
        return Err(CheckpointError::Inconsistent {
            field: "layer",
            reason: format!("layers do not match the plan for {:?}", manifest.hyper),
        });
    }
    let expected = expected_count(&plan);
    if manifest.parameter_count != expected {
        return Err(CheckpointError::Inconsistent {
            field: "parameter_count",
            reason: format!("{} declared, topology needs {expected}", manifest.parameter_count),
        });
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() < expected * 8 {
        return Err(CheckpointError::Truncated(format!(
            "{} parameter bytes, expected {}",
            payload.len(),
            expected * 8
        )));
    }
    if payload.len() > expected * 8 {
        return Err(CheckpointError::Inconsistent {
            field: "parameter_count",
            reason: format!("{} trailing bytes", payload.len() - expected * 8),
        });
    }

    let mut floats = Floats { bytes: &payload };
    let mut layers = Vec::with_capacity(plan.len() - 1);
    for p in plan.windows(2) {
        let (i, o) = (p[0].width, p[1].width);
        let layer = match p[1].kind {
            super::LayerKind::Lstm => {
                let w_in = floats.matrix(i, 4 * o);
                let w_rec = floats.matrix(o, 4 * o);
                LayerParams::Lstm(LstmLayerParams::new(w_in, w_rec, floats.take(4 * o)).expect("shapes from plan"))
            }
            _ => {
                let w = floats.matrix(i, o);
                LayerParams::Dense(DenseLayerParams::new(w, floats.take(o)).expect("shapes from plan"))
            }
        };
        layers.push(layer);
    }
    let model = ModelParams {
        hyper: manifest.hyper,
        seed: manifest.seed,
        network: Network::new(layers).expect("widths chain by construction"),
        meta: manifest.meta,
    };
    Ok(model)
}
