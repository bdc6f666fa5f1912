//! JSON checkpoints: a dims header, every tensor in row-major order, and the
//! hash of the vocabulary the model was trained against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{ModelConfig, Weights};
use super::ModelParams;

pub const FORMAT: &str = "hmg-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("tensor {name:?}: {reason}")]
    Tensor { name: String, reason: String },
    #[error("invalid model configuration: {0}")]
    Config(#[from] super::ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_params(p: &ModelParams, vocab_hash: &str) -> Self {
        let shapes = tensor_shapes(&p.weights);
        let mut tensors = Vec::new();
        p.weights.visit(&mut |name, xs| {
            tensors.push(Tensor {
                name: name.to_string(),
                shape: shapes[tensors.len()].clone(),
                data: xs.to_vec(),
            })
        });
        Self {
            format: FORMAT.to_string(),
            config: p.config,
            vocab_hash: vocab_hash.to_string(),
            tensors,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams, CheckpointError> {
        if self.format != FORMAT {
            return Err(CheckpointError::Format(self.format.clone()));
        }
        // shapes come from the config; values are overwritten below
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = ModelParams::init(self.config, &mut rng)?;
        let mut idx = 0;
        let mut failure = None;
        params.weights.visit_mut(&mut |name, xs| {
            if failure.is_some() {
                return;
            }
            match self.tensors.get(idx) {
                Some(t) if t.name == name && t.data.len() == xs.len() => xs.copy_from_slice(&t.data),
                Some(t) => {
                    failure = Some(CheckpointError::Tensor {
                        name: t.name.clone(),
                        reason: format!("expected {name} with {} values", xs.len()),
                    })
                }
                None => {
                    failure = Some(CheckpointError::Tensor {
                        name: name.to_string(),
                        reason: "missing".into(),
                    })
                }
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != self.tensors.len() {
            return Err(CheckpointError::Tensor {
                name: self.tensors[idx].name.clone(),
                reason: "unexpected extra tensor".into(),
            });
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(s)?)
    }
}

fn tensor_shapes(w: &Weights) -> Vec<Vec<usize>> {
    let d = w.embedding.ncols();
    let mut shapes = Vec::new();
    w.visit(&mut |name, xs| {
        let shape = if name == "gate" {
            vec![]
        } else if name == "embedding" {
            vec![w.embedding.nrows(), d]
        } else if name.ends_with(".w1") {
            vec![d, xs.len() / d]
        } else if xs.len() == d || name.ends_with(".b1") {
            vec![xs.len()]
        } else {
            vec![xs.len() / d, d]
        };
        shapes.push(shape);
    });
    shapes
}
