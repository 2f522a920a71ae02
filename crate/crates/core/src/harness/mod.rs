//! Run configuration, checkpoint persistence, and the command entry points
//! behind the CLI.

mod checkpoint;
mod commands;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_infer, cmd_retrieval_eval, cmd_synth, cmd_train, AblateReport,
    AblateRow, PredictionFile, PredictionRecord, SegmentsFile, SegmentsQuery,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::EncoderConfig;
use crate::keyframe::SelectionStrategy;
use crate::memory::MemoryConfig;
use crate::params::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Build identifier embedded in reports.
pub fn build_id() -> String {
    option_env!("BUILD_GIT_DESCRIBE")
        .unwrap_or(env!("CARGO_PKG_VERSION"))
        .to_string()
}

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration or checkpoint metadata; CLI exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Missing or malformed data files; CLI exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// Internal failures during training/inference/evaluation; exit code 4.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Runtime(_) => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    /// Train with the annotated per-object moments.
    #[default]
    Annotations,
    /// Train with pseudo-moments from the inference selection strategy.
    Selection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalSource {
    /// Restrict interval-bound selection to the annotated moment segments.
    #[default]
    GtSegments,
    /// Restrict to intervals from the segments file.
    SegmentsFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(flatten)]
    pub strategy: SelectionStrategy,
    /// External per-frame score CSV, required by the `external` scorer.
    #[serde(default)]
    pub scores_file: Option<PathBuf>,
    /// Scorer backing the top-k strategies.
    #[serde(default)]
    pub scorer: Option<crate::keyframe::ScorerKind>,
    #[serde(default)]
    pub interval_source: IntervalSource,
    /// Predicted segments file backing `topk_in_interval`.
    #[serde(default)]
    pub segments_file: Option<PathBuf>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            strategy: SelectionStrategy::GtMoments,
            scores_file: None,
            scorer: None,
            interval_source: IntervalSource::default(),
            segments_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Boundary tolerance in pixels; the DAVIS diagonal rule when absent.
    #[serde(default)]
    pub boundary_tol: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![1, 2, 3],
        }
    }
}

fn default_seed() -> u64 {
    1
}

/// One JSON document drives every command; commands read the sections they
/// need. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub memory: MemoryConfigSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub moment_source: MomentSource,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// Serde mirror of [`MemoryConfig`] with defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfigSection {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_attend_k")]
    pub attend_k: usize,
}

fn default_capacity() -> usize {
    MemoryConfig::default().capacity
}

fn default_attend_k() -> usize {
    MemoryConfig::default().attend_k
}

impl Default for MemoryConfigSection {
    fn default() -> Self {
        MemoryConfigSection {
            capacity: default_capacity(),
            attend_k: default_attend_k(),
        }
    }
}

impl From<MemoryConfigSection> for MemoryConfig {
    fn from(s: MemoryConfigSection) -> Self {
        MemoryConfig {
            capacity: s.capacity,
            attend_k: s.attend_k,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            dataset: None,
            eval_dataset: None,
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            memory: MemoryConfigSection::default(),
            training: TrainConfig::default(),
            moment_source: MomentSource::default(),
            inference: InferenceConfig::default(),
            metrics: MetricsConfig::default(),
            synth: SynthConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.encoder.channels.is_empty() {
            return Err(HarnessError::Config("encoder.channels must be non-empty".into()));
        }
        if self.encoder.patch == 0 || self.encoder.text_dim == 0 || self.encoder.vocab_size == 0 {
            return Err(HarnessError::Config("encoder dims must be positive".into()));
        }
        if self.model.adapter_width == 0 || self.model.prompt_dim == 0 {
            return Err(HarnessError::Config("model dims must be positive".into()));
        }
        if self.memory.capacity == 0 || self.memory.attend_k == 0 {
            return Err(HarnessError::Config("memory capacity and attend_k must be positive".into()));
        }
        if self.training.clip_length < 2 || self.training.clip_length % 2 != 0 {
            return Err(HarnessError::Config(
                "training.clip_length must be an even number >= 2".into(),
            ));
        }
        if self.training.epochs == 0 {
            return Err(HarnessError::Config("training.epochs must be positive".into()));
        }
        if !self.training.lr.is_finite() || self.training.lr < 0.0 {
            return Err(HarnessError::Config("training.lr must be a finite non-negative number".into()));
        }
        self.training
            .weights
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.ablate.seeds.is_empty() {
            return Err(HarnessError::Config("ablate.seeds must be non-empty".into()));
        }
        if self.synth.videos == 0 {
            return Err(HarnessError::Config("synth.videos must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical serialized form, embedded in outputs for
    /// provenance.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Write bytes atomically: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    if !parent.as_os_str().is_empty() {
        std::fs::create_dir_all(parent)
            .map_err(|e| HarnessError::Runtime(format!("mkdir {}: {e}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)
        .map_err(|e| HarnessError::Runtime(format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| HarnessError::Runtime(format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hashes_stably() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), config.hash());
        let mut other = config.clone();
        other.seed = 2;
        assert_ne!(config.hash(), other.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"seed": 1, "bogus_field": true}"#;
        let err = serde_json::from_str::<RunConfig>(json).unwrap_err();
        assert!(err.to_string().contains("bogus_field"));
    }

    #[test]
    fn nested_unknown_keys_are_rejected() {
        let json = r#"{"training": {"clip_length": 8, "epochs": 1, "lr": 0.01, "typo": 1}}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn bad_clip_length_fails_validation() {
        let mut config = RunConfig::default();
        config.training.clip_length = 3;
        let err = config.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn inference_strategy_round_trips_through_json() {
        let json = r#"{"inference": {"strategy": "topk", "k": 4}}"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.inference.strategy, SelectionStrategy::Topk { k: 4 });
    }
}
