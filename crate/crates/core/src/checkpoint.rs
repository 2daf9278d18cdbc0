//! JSON checkpoints of a model and, for ACL and PS runs, the propensity head.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::RecModel;
use crate::propensity::PropensityHead;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: RecModel,
    pub head: Option<PropensityHead>,
}

impl Checkpoint {
    pub fn new(model: RecModel, head: Option<PropensityHead>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            head,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
