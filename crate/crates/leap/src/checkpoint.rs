//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use leap_core::model::{LeapConfig, LeapModel};
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};
use crate::text::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Epoch (0-based) the parameters come from.
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub model: LeapModel,
    /// Absent for models trained on pre-encoded ids.
    pub vocabulary: Option<Vocabulary>,
}

impl Checkpoint {
    pub fn new(model: LeapModel, vocabulary: Option<Vocabulary>, epoch: usize, dev_accuracy: f64) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch,
            dev_accuracy,
            model,
            vocabulary,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| LeapError::io(path, e))
    }

    /// Loads a checkpoint and checks its version, parameter shapes, and
    /// vocabulary size.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LeapError::io(path, e))?;
        let bad = |message: String| LeapError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.model
            .params
            .validate(&ckpt.model.config)
            .map_err(|e| bad(e.to_string()))?;
        if let Some(v) = &ckpt.vocabulary {
            if v.len() != ckpt.model.config.vocab_size {
                return Err(bad(format!(
                    "vocabulary has {} entries, model expects {}",
                    v.len(),
                    ckpt.model.config.vocab_size
                )));
            }
        }
        Ok(ckpt)
    }

    /// Errors unless the stored model has exactly the dimensions of `cfg`.
    pub fn check_config(&self, cfg: &LeapConfig, path: &Path) -> Result<()> {
        if &self.model.config != cfg {
            return Err(LeapError::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "model shape {:?} does not match configured {:?}",
                    self.model.config, cfg
                ),
            });
        }
        Ok(())
    }
}
