// SPDX-License-Identifier: MIT OR Apache-2.0

//! The JSON run configuration shared by every subcommand.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sae_lab::activation_store::Sublayer;
use sae_lab::sae::{TrainConfig, Variant};
use sae_lab::steering::SteerConfig;
use sae_lab::suppression::{Pooling, DEFAULT_RELAXED_DROP_PP, DEFAULT_TAU_POINTS, TYPOGRAPHIC_LAMBDA, TYPOGRAPHIC_TAU};
use sae_lab::toy::{SynthVisionSpec, ToyVitConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// A problem with the configuration or the command line; exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; copied into the data, model and training seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ToyVitConfig,
    pub sae: SaeSection,
    pub train: TrainConfig,
    pub steer: SteerSection,
    pub suppress: SuppressSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("sae-lab-run"),
            data: DataSection::default(),
            model: ToyVitConfig::default(),
            sae: SaeSection::default(),
            train: TrainConfig {
                expansion_factor: 8,
                learning_rate: 3e-3,
                warmup_steps: 100,
                total_steps: 2000,
                batch_size: 256,
                variant: Variant::TopK { k: 16 },
                ghost_window_tokens: 20_000,
                ..TrainConfig::default()
            },
            steer: SteerSection::default(),
            suppress: SuppressSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub vision: SynthVisionSpec,
    pub vocab_size: usize,
    pub sublayer: Sublayer,
    /// Also dump validation and test activations of typographically
    /// attacked images.
    pub typographic: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            vision: SynthVisionSpec::default(),
            vocab_size: 512,
            sublayer: Sublayer::ResidPost,
            typographic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    /// Layers trained, evaluated, steered and ablated.
    pub layers: Vec<usize>,
    /// L1 coefficient used by the `vanilla` preset.
    pub vanilla_l1_coeff: f32,
    /// `k` used by the `topk` preset.
    pub topk_k: usize,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            layers: vec![0, 1, 2, 3],
            vanilla_l1_coeff: 1e-2,
            topk_k: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerSection {
    pub sweep: SteerConfig,
    /// Explicit feature ids; overrides `feature_subset`.
    pub features: Option<Vec<usize>>,
    /// Steer only the first this many features when `features` is unset.
    pub feature_subset: Option<usize>,
    /// With no explicit `sweep.sample_ids`, steer only the first this many
    /// validation images.
    pub n_images: Option<usize>,
    /// Strength at which every target is scored for the layer metrics.
    pub scan_strength: f32,
    /// Full strength sweeps are written for this many of the most steerable
    /// features and neurons per layer.
    pub sweep_top: usize,
    pub histogram_lo: f64,
    pub histogram_hi: f64,
    pub histogram_bins: usize,
}

impl Default for SteerSection {
    fn default() -> Self {
        Self {
            sweep: SteerConfig {
                sample_ids: None,
                ..SteerConfig::default()
            },
            features: None,
            feature_subset: Some(256),
            n_images: Some(64),
            scan_strength: 150.0,
            sweep_top: 8,
            histogram_lo: 1e-4,
            histogram_hi: 2.0,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressTask {
    /// Worst-group accuracy on the planted spurious attribute.
    Spurious,
    /// Accuracy recovery on typographically attacked images.
    Typographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuppressSection {
    pub task: SuppressTask,
    pub tau_points: usize,
    pub relaxed_max_drop_pp: f64,
    pub pooling: Pooling,
    pub random_seeds: usize,
    pub typographic_tau: f64,
    pub typographic_lambda: f32,
    pub typographic_pooling: Pooling,
}

impl Default for SuppressSection {
    fn default() -> Self {
        Self {
            task: SuppressTask::Spurious,
            tau_points: DEFAULT_TAU_POINTS,
            relaxed_max_drop_pp: DEFAULT_RELAXED_DROP_PP,
            pooling: Pooling::AllTokens,
            random_seeds: 10,
            typographic_tau: TYPOGRAPHIC_TAU,
            typographic_lambda: TYPOGRAPHIC_LAMBDA,
            typographic_pooling: Pooling::Cls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub markdown: bool,
    pub title: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            markdown: true,
            title: "Feature suppression".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| config_error(format!("invalid JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(config_error(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(config_error("schema_version is required")),
        }
        serde_json::from_value(value).map_err(|e| config_error(format!("schema error: {e}")))
    }

    /// Applies the master seed and checks every section.
    pub fn finalize(mut self) -> anyhow::Result<Self> {
        self.data.vision.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.data.vision.validate().map_err(|e| config_error(format!("data.vision: {e}")))?;
        self.model.validate().map_err(|e| config_error(format!("model: {e}")))?;
        self.train.validate().map_err(|e| config_error(format!("train: {e}")))?;
        self.steer.sweep.validate().map_err(|e| config_error(format!("steer.sweep: {e}")))?;
        if self.data.vocab_size < self.data.vision.n_classes {
            return Err(config_error("data.vocab_size must hold every class"));
        }
        if self.sae.layers.is_empty() {
            return Err(config_error("sae.layers must not be empty"));
        }
        if let Some(&l) = self.sae.layers.iter().find(|&&l| l >= self.model.n_layers) {
            return Err(config_error(format!(
                "sae.layers names layer {l} but the model has {} layers",
                self.model.n_layers
            )));
        }
        if !(self.steer.scan_strength.is_finite()) {
            return Err(config_error("steer.scan_strength must be finite"));
        }
        if self.suppress.tau_points < 2 {
            return Err(config_error("suppress.tau_points must be at least 2"));
        }
        if self.suppress.random_seeds == 0 {
            return Err(config_error("suppress.random_seeds must be positive"));
        }
        Ok(self)
    }
}
