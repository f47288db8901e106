//! Run configuration: every setting with its default, loaded from JSON and
//! re-validated, then echoed into each output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::ScheduleKind;
use crate::guidance::GuidanceConfig;
use crate::jamdit::ModelConfig;
use crate::probes::ShuffleProbeConfig;
use crate::synthdata::DatasetConfig;
use crate::trainer::TrainConfig;

/// File name of the effective config written next to every command's outputs.
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub class_id: usize,
    pub count: usize,
    /// Also write every frame of video and flow video as PPM.
    pub dump_frames: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 100,
            schedule: ScheduleKind::Uniform,
            seed: 0,
            class_id: 0,
            count: 1,
            dump_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub shuffle: ShuffleProbeConfig,
    pub sdedit_starts: Vec<f64>,
    pub sdedit_sources: usize,
    pub coherence_per_class: usize,
    /// Sampler steps used by the SDEdit and coherence probes.
    pub steps: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            shuffle: ShuffleProbeConfig::default(),
            sdedit_starts: vec![0.2, 0.6, 0.8],
            sdedit_sources: 16,
            coherence_per_class: 3,
            steps: crate::flowmatch::DEFAULT_SAMPLING_STEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sample: SampleConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if self.sample.steps < 1 {
            return Err(Error::invalid("sample.steps", "must be at least 1"));
        }
        if self.sample.count < 1 {
            return Err(Error::invalid("sample.count", "must be at least 1"));
        }
        if self.sample.class_id >= self.model.n_classes {
            return Err(Error::invalid("sample.class_id", "unknown class"));
        }
        if self.probe.steps < 1 {
            return Err(Error::invalid("probe.steps", "must be at least 1"));
        }
        if self.probe.sdedit_starts.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("probe.sdedit_starts", "start times must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective config as `config.json` inside `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        fs::write(dir.as_ref().join(CONFIG_ECHO), self.to_json())?;
        Ok(())
    }
}
