//! Versioned JSON checkpoints.
//!
//! `serde_json` writes floats in shortest round-trip form, so `f32`
//! tensors reload bit for bit.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::params::{BatchNormState, EncoderConfig, ModelParams};
use crate::augment::TransformKind;
use crate::error::{ClanError, Result};

pub const CHECKPOINT_FORMAT: &str = "clan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// "time" or "frequency" for towers, free text otherwise.
    pub domain: String,
    pub cst: Vec<TransformKind>,
    pub positive_kind: Option<TransformKind>,
    pub epochs_done: usize,
    pub encoder: EncoderConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f32>>,
    pub bn_running: Option<BatchNormState<f32>>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams<f32>, config_hash: &str, seed: u64, domain: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            domain: domain.into(),
            cst: Vec::new(),
            positive_kind: None,
            epochs_done: 0,
            encoder: params.config.clone(),
            names: params.names.clone(),
            tensors: params.tensors.clone(),
            bn_running: params.bn_running.clone(),
            optimizer: None,
        }
    }

    pub fn params(&self) -> Result<ModelParams<f32>> {
        let p = ModelParams::from_parts(self.encoder.clone(), self.tensors.clone(), self.bn_running.clone())?;
        if p.names != self.names {
            return Err(ClanError::Schema("checkpoint tensor names do not match the encoder layout".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| ClanError::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| ClanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| ClanError::json(path.display().to_string(), e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ClanError::Schema(format!("{}: not a checkpoint", path.display())));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ClanError::Schema(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
