use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use distgate_core::inference::WindowConfig;
use distgate_core::instances::ExtractionConfig;
use distgate_core::phantom::PhantomConfig;
use distgate_core::pipeline::DEFAULT_SPLIT;
use serde::{Deserialize, Serialize};

use crate::train::{GatingConfig, TrainConfig};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_CASES: usize = 30;

/// Everything a run depends on besides the data. Every field has a
/// default, so a config file only needs the keys it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_cases: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub phantom: PhantomConfig,
    pub gating: GatingConfig,
    pub train: TrainConfig,
    pub window: WindowConfig,
    pub extraction: ExtractionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            n_cases: DEFAULT_CASES,
            split: DEFAULT_SPLIT,
            phantom: PhantomConfig::default(),
            gating: GatingConfig::default(),
            train: TrainConfig::default(),
            window: WindowConfig { window: [96, 96, 64], stride: [64, 64, 32] },
            extraction: ExtractionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
