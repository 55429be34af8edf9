use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelKind, NetworkParams, NnError};
use crate::autodiff::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk model. `weights[l]` is the `widths[l] x widths[l+1]` matrix of
/// layer `l` flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub tau: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub benchmark_id: Option<u8>,
    pub training_config: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error(transparent)]
    Network(#[from] NnError),
}

impl ModelFile {
    pub fn new(
        kind: ModelKind,
        params: &NetworkParams,
        seed: u64,
        benchmark_id: Option<u8>,
        training_config: serde_json::Value,
    ) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            kind,
            widths: params.widths().to_vec(),
            tau: params.tau(),
            weights: params.weights().iter().map(|w| w.data().to_vec()).collect(),
            biases: params.biases().iter().map(|b| b.data().to_vec()).collect(),
            seed,
            benchmark_id,
            training_config,
        }
    }

    pub fn params(&self) -> Result<NetworkParams, ModelFileError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelFileError::Version(self.format_version));
        }
        let layers = self.widths.len().saturating_sub(1);
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(NnError::ShapeMismatch.into());
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, pair) in self.widths.windows(2).enumerate() {
            if self.weights[l].len() != pair[0] * pair[1] || self.biases[l].len() != pair[1] {
                return Err(NnError::ShapeMismatch.into());
            }
            weights.push(Tensor::new(pair[0], pair[1], self.weights[l].clone()));
            biases.push(Tensor::row(self.biases[l].clone()));
        }
        Ok(NetworkParams::from_parts(self.widths.clone(), self.tau, weights, biases)?)
    }

    pub fn to_json(&self) -> Result<String, ModelFileError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelFileError> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelFileError::Version(m.format_version));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
