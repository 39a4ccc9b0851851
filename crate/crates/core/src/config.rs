//! Whole-run configuration: one JSON document with a section per subsystem.
//! Unknown keys are rejected so misspelled settings fail fast; omitted keys
//! fall back to the documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::env::EnvConfig;
use crate::gpn::GPNConfig;
use crate::grpo::GrpoConfig;
use crate::stage1::Stage1Config;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of demonstration episodes to generate.
    pub episodes: usize,
    /// Standard deviation of the expert action jitter.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            episodes: 256,
            noise_scale: 0.04,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Success rate is averaged over this many episodes per task.
    pub episodes_per_task: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_task: 100,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub gpn: GPNConfig,
    pub stage1: Stage1Config,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Cross-section consistency checks on top of per-section validation.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.backbone.validate()?;
        self.gpn.validate()?;
        self.stage1.validate()?;
        self.grpo.validate()?;
        let b = &self.backbone;
        let e = &self.env;
        if b.img != e.img || b.f_frames != e.f_frames || b.chunk_h != e.chunk_h
            || b.t_tasks != e.t_tasks
        {
            return Err(Error::Config(
                "backbone dimensions must match the environment (img, f_frames, chunk_h, t_tasks)"
                    .into(),
            ));
        }
        if self.gpn.img != e.img || self.gpn.f_frames != e.f_frames {
            return Err(Error::Config(
                "gating-policy dimensions must match the environment (img, f_frames)".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the canonical (serialized) form; stable across reruns.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}
