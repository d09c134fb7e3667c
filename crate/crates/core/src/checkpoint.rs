//! Parameter files: a JSON manifest whose tensors carry little-endian
//! `f64` bytes (base64), so values round-trip bit for bit.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{MpgatError, Result};
use crate::features::Normalizer;
use crate::model::{ModelConfig, Mpgat, MpgatParams};

pub const CHECKPOINT_VERSION: &str = "mpgat-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// base64 of the little-endian `f64` array.
    pub data: String,
}

impl TensorEntry {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| MpgatError::Checkpoint(format!("{}: bad base64: {e}", self.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(MpgatError::Checkpoint(format!("{}: truncated data", self.name)));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), values)
            .map_err(|e| MpgatError::Checkpoint(format!("{}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
    /// Graph JSON the model was trained with.
    #[serde(default)]
    pub graph: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Mpgat, normalizer: Option<&Normalizer>, graph: Option<String>) -> Self {
        let tensors = model
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry::encode(&name, t))
            .collect();
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            config: model.config.clone(),
            normalizer: normalizer.cloned(),
            graph,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<Mpgat> {
        if self.version != CHECKPOINT_VERSION {
            return Err(MpgatError::Checkpoint(format!(
                "version {:?}, expected {CHECKPOINT_VERSION:?}",
                self.version
            )));
        }
        self.config.validate()?;
        let mut params = MpgatParams::init(&self.config, 0);
        let entries = self
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), e.decode()?)))
            .collect::<Result<Vec<_>>>()?;
        params.load_named(&entries)?;
        Ok(Mpgat {
            config: self.config.clone(),
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read(path)?;
        Ok(serde_json::from_slice(&text)?)
    }
}
