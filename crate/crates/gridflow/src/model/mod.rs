//! Surrogate model definitions: the gated graph network and the
//! two-layer graph-convolution baseline, as parameterized forward
//! computations on graph samples.

mod gcn;
mod ggnn;

pub use gcn::GcnModel;
pub use ggnn::GgnnModel;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::scenario::{GraphSample, NormStats, NODE_FEATURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("sample has {actual} nodes but the model head is bound to {expected}")]
    NodeCountMismatch { expected: usize, actual: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-bus voltage magnitude and angle predictions in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub v_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
}

impl Prediction {
    /// Splits an N x 2 output tensor with rows (V_i, theta_i).
    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, _) = t.dims2();
        let mut v_hat = Vec::with_capacity(n);
        let mut theta_hat = Vec::with_capacity(n);
        for i in 0..n {
            v_hat.push(t.data[i * 2]);
            theta_hat.push(t.data[i * 2 + 1]);
        }
        Self { v_hat, theta_hat }
    }
}

/// Architecture-identifying hyperparameters, also the checkpoint header body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelSpec {
    Ggnn {
        t: usize,
        h: usize,
        dropout: f64,
        edge_weights: bool,
    },
    Gcn {
        n_nodes: usize,
        hidden: usize,
        head: usize,
        dropout: f64,
    },
}

/// A surrogate architecture: owns its parameter layout and forward pass.
/// Parameters travel as a flat `Vec<Tensor>` in declared order so the
/// optimizer and checkpoints stay model-agnostic.
pub trait Model {
    fn spec(&self) -> ModelSpec;
    /// Shapes of the learnable tensors, in declared order.
    fn param_shapes(&self) -> Vec<Vec<usize>>;
    /// Seeded initial parameters.
    fn init_params(&self, seed: u64) -> Vec<Tensor>;
    /// Builds the forward computation on the tape; returns the N x 2
    /// prediction node with rows (V_i, theta_i). Features are normalized
    /// with the dataset's stats inside.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        sample: &GraphSample,
        norm: &NormStats,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, ModelError>;
}

pub fn model_from_spec(spec: &ModelSpec) -> Box<dyn Model> {
    match *spec {
        ModelSpec::Ggnn {
            t,
            h,
            dropout,
            edge_weights,
        } => Box::new(GgnnModel {
            t,
            h,
            dropout,
            edge_weights,
        }),
        ModelSpec::Gcn {
            n_nodes,
            hidden,
            head,
            dropout,
        } => Box::new(GcnModel {
            n_nodes,
            hidden,
            head,
            dropout,
        }),
    }
}

/// Glorot-uniform matrix from a seeded generator.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

/// Registers the normalized feature matrix of a sample as a constant node.
pub(crate) fn normalized_features(
    tape: &mut Tape,
    sample: &GraphSample,
    norm: &NormStats,
) -> NodeId {
    let n = sample.n_nodes();
    let mut data = vec![0.0; n * NODE_FEATURES];
    for (i, row) in sample.node_features.iter().enumerate() {
        norm.normalize_row(row, &mut data[i * NODE_FEATURES..(i + 1) * NODE_FEATURES]);
    }
    tape.constant(Tensor::matrix(n, NODE_FEATURES, data))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn norm_stats_digest(norm: &NormStats) -> String {
    let json = serde_json::to_string(norm).expect("norm stats serialize");
    format!("{:016x}", fnv1a(json.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub norm_stats_digest: String,
    pub seed: u64,
    pub param_count: usize,
}

/// Checkpoint layout: one JSON header line, then the parameter tensors as a
/// flat little-endian f64 block in declared order. Round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    params: &[Tensor],
) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let json = serde_json::to_string(header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    for t in params {
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>), ModelError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    {
        use std::io::BufRead;
        f.read_until(b'\n', &mut header_line)?;
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    let model = model_from_spec(&header.spec);
    let shapes = model.param_shapes();
    let mut params = Vec::with_capacity(shapes.len());
    let mut total = 0usize;
    for shape in shapes {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            f.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        total += len;
        params.push(Tensor::new(shape, data));
    }
    if total != header.param_count {
        return Err(ModelError::Checkpoint(format!(
            "parameter count {total} does not match header {}",
            header.param_count
        )));
    }
    Ok((header, params))
}

/// Runs a model in eval mode and extracts the prediction.
pub fn predict(
    model: &dyn Model,
    params: &[Tensor],
    sample: &GraphSample,
    norm: &NormStats,
) -> Result<Prediction, ModelError> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut tape, &ids, sample, norm, Mode::Eval, &mut rng)?;
    Ok(Prediction::from_tensor(tape.value(out)))
}

#[cfg(test)]
pub(crate) fn identity_norm() -> NormStats {
    NormStats {
        mean: vec![0.0; NODE_FEATURES],
        std: vec![1.0; NODE_FEATURES],
        constant: vec![false; NODE_FEATURES],
        exempt: vec![true; NODE_FEATURES],
    }
}
