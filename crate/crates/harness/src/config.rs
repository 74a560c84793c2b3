//! Experiment configuration: a JSON-serializable description of one run,
//! plus a stable fingerprint used to key result rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::manifest::SplitPolicy;
use crate::synth::SynthParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SourceOnly,
    Dan,
    Dann,
    Autodial,
    Adda,
}

impl Algorithm {
    pub fn tag(&self) -> &'static str {
        match self {
            Algorithm::SourceOnly => "source-only",
            Algorithm::Dan => "dan",
            Algorithm::Dann => "dann",
            Algorithm::Autodial => "autodial",
            Algorithm::Adda => "adda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Rgb,
    Depth,
    Rgbd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synth(SynthParams),
    Ingest { source_root: PathBuf, target_root: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Fixed,
    Inverse { gamma: f64, power: f64 },
    Step { gamma: f64, step_size: u64 },
}

impl LrSchedule {
    pub fn to_policy(self) -> shiftbench_core::optim::LrPolicy {
        use shiftbench_core::optim::LrPolicy;
        match self {
            LrSchedule::Fixed => LrPolicy::Fixed,
            LrSchedule::Inverse { gamma, power } => LrPolicy::Inverse { gamma, power },
            LrSchedule::Step { gamma, step_size } => LrPolicy::Step { gamma, step_size },
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_hidden() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub modality: Modality,
    pub data: DataSource,
    pub split: SplitPolicy,
    pub lr: f64,
    #[serde(default = "LrSchedule::default")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Adaptation-loss weight: MK-MMD weight, reversal strength, or the
    /// target-entropy weight, depending on the algorithm.
    pub loss_weight: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub seed: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Fixed
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(HarnessError::InvalidConfig("lr must be positive".into()));
        }
        if self.batch_size < 4 {
            return Err(HarnessError::InvalidConfig("batch_size must be at least 4".into()));
        }
        if self.epochs == 0 {
            return Err(HarnessError::InvalidConfig("epochs must be positive".into()));
        }
        if self.loss_weight < 0.0 || !self.loss_weight.is_finite() {
            return Err(HarnessError::InvalidConfig("loss_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HarnessError::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.hidden == 0 {
            return Err(HarnessError::InvalidConfig("hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// FNV-1a over the canonical JSON serialization; hexadecimal. Stable
    /// across runs for identical settings, key for result rows.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Effective seed: the `SHIFTBENCH_SEED` environment variable wins
    /// over the configured value when set and parseable.
    pub fn effective_seed(&self) -> u64 {
        match std::env::var("SHIFTBENCH_SEED") {
            Ok(v) => v.trim().parse().unwrap_or(self.seed),
            Err(_) => self.seed,
        }
    }
}
