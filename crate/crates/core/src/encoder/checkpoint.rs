use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_params, EncoderConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensorcore::ParamSet;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One training stage in a checkpoint's lineage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub role: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub examples: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// JSON container for one encoder: config, named tensors and stage lineage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    #[serde(default)]
    pub lineage: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        validate_params(&config, &params)?;
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            config,
            lineage: Vec::new(),
            vocab: None,
            params,
        })
    }

    /// Returns a copy with `record` appended to the lineage and new parameters.
    pub fn advance(&self, record: StageRecord, params: ParamSet) -> Result<Self> {
        validate_params(&self.config, &params)?;
        let mut next = self.clone();
        next.lineage.push(record);
        next.params = params;
        Ok(next)
    }

    pub fn stages(&self) -> Vec<&str> {
        self.lineage.iter().map(|r| r.stage.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// Loads and validates every tensor shape against the stored config.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        validate_params(&ck.config, &ck.params)?;
        if let Some(v) = &ck.vocab {
            if v.len() != ck.config.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "vocabulary has {} entries, config expects {}",
                    v.len(),
                    ck.config.vocab_size
                )));
            }
        }
        Ok(ck)
    }
}
