//! Versioned JSON checkpoints: named parameter arrays plus every config
//! needed to rebuild the model, and optionally the optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::AugmentPolicy;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::losses::ProjectorConfig;
use crate::params::{Adam, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub head: HeadConfig,
    pub projector: ProjectorConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentPolicy,
    pub interactions: Vec<String>,
    pub objects: Vec<String>,
    pub encoder_checksums: [String; 2],
    pub params: ParamStore,
    #[serde(default)]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported version {v} (expected {CHECKPOINT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{}: missing version field", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
