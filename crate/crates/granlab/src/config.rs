//! Experiment configuration documents.
//!
//! Every subcommand reads the same JSON shape. Keys not listed here are
//! rejected. Command-line flags are written into this structure on top of
//! whatever `--config` supplied, so a document and the equivalent flags
//! produce identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use granlab_core::moe::{make_config, Activation, DistributionKind, Gating, InputDistribution, MoeConfig};
use granlab_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSpec {
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub w: Option<usize>,
    pub d: Option<usize>,
    pub activation: Option<Activation>,
    pub gating: Option<Gating>,
    pub route_bias: Option<bool>,
}

impl MoeSpec {
    pub fn require_m(&self) -> Result<usize, ConfigError> {
        self.m.ok_or(ConfigError::Missing("moe.m"))
    }

    pub fn require_k(&self) -> Result<usize, ConfigError> {
        self.k.ok_or(ConfigError::Missing("moe.k"))
    }

    pub fn require_d(&self) -> Result<usize, ConfigError> {
        self.d.ok_or(ConfigError::Missing("moe.d"))
    }

    /// Full configuration, with `w` defaulting to 1 and the given gating default.
    pub fn build(&self, default_gating: Gating) -> Result<MoeConfig, ConfigError> {
        make_config(
            self.require_m()?,
            self.require_k()?,
            self.w.unwrap_or(1),
            self.require_d()?,
            self.activation.ok_or(ConfigError::Missing("moe.activation"))?,
            self.gating.unwrap_or(default_gating),
            self.route_bias.unwrap_or(false),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Teacher for `train` and `sweep`: either a checkpoint or a random layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherFields {
    pub checkpoint: Option<PathBuf>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub w: Option<usize>,
    pub activation: Option<Activation>,
    pub gating: Option<Gating>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Student granularities `k'`.
    #[serde(default)]
    pub granularities: Vec<usize>,
    /// Active neurons `k'w'` shared by every student.
    pub active: Option<usize>,
    /// Total neurons `m'w'` shared by every student.
    pub total: Option<usize>,
    #[serde(default)]
    pub lrs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    #[serde(default)]
    pub moe: MoeSpec,
    pub dist: Option<DistributionKind>,
    pub seeds: Option<Vec<u64>>,
    pub n_samples: Option<usize>,
    pub train: Option<TrainConfig>,
    pub sweep: Option<SweepSpec>,
    pub teacher: Option<TeacherFields>,
    pub lemma: Option<String>,
    /// Lemma-specific numeric parameters.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub f: Option<PathBuf>,
    pub f_prime: Option<PathBuf>,
    pub c_prime: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub full_scale: Option<bool>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: origin.to_string(), source })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().filter(|s| !s.is_empty()).unwrap_or_else(|| vec![0])
    }

    pub fn dist(&self, d: usize) -> InputDistribution {
        InputDistribution { kind: self.dist.unwrap_or(DistributionKind::GaussianIso), d }
    }

    pub fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn require_param(&self, key: &'static str) -> Result<f64, ConfigError> {
        self.params.get(key).copied().ok_or(ConfigError::Missing(key))
    }

    pub fn n_samples_or(&self, default: usize) -> usize {
        self.n_samples.unwrap_or(default)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn full_scale(&self) -> bool {
        self.full_scale.unwrap_or(false)
    }
}
