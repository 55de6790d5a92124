use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierParams, GeneratorParams};
use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::RngSnapshot;

pub const CHECKPOINT_FORMAT: &str = "otfeat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a later stage needs to resume: the trained networks, the random
/// stream position and free-form metadata (effective configuration etc).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub classifier: Option<ClassifierParams>,
    pub generator: Option<GeneratorParams>,
    pub rng: RngSnapshot,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(feature_dim: usize, rng: RngSnapshot) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            feature_dim,
            classifier: None,
            generator: None,
            rng,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "unsupported checkpoint {:?} version {}",
                    self.format, self.version
                ),
            });
        }
        if let Some(c) = &self.classifier {
            c.validate()?;
            if c.dim() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    found: c.dim(),
                });
            }
        }
        if let Some(g) = &self.generator {
            g.validate()?;
            if g.feature_dim != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    found: g.feature_dim,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
