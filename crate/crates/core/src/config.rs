//! Run configuration, read from TOML.
//!
//! ```toml
//! [architecture]
//! base = "rbm"          # required: rbm | dflow | multicov | gaussian
//!
//! [data]
//! dataset = "gauss8"    # required: moons | rings | gauss8 | checker | binimg
//! ```
//!
//! Every other key has a default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::base::BaseKind;
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::flow::{CouplingKind, FlowConfig};
use crate::model::{Dequant, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub base: Option<BaseKind>,
    pub delta: Option<f64>,
    pub coupling: CouplingKind,
    /// Couplings for 2-D data; image data uses the fixed image layout.
    pub couplings: usize,
    pub hidden: usize,
    pub components: usize,
    pub dequant: Dequant,
    pub dequant_couplings: usize,
    pub init_coupling_std: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let f = FlowConfig::default();
        Self {
            base: None,
            delta: None,
            coupling: f.coupling,
            couplings: f.couplings,
            hidden: f.hidden,
            components: f.components,
            dequant: Dequant::Uniform,
            dequant_couplings: 4,
            init_coupling_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Mode {
    /// `l2_coeff · (‖W‖² + ‖h‖²)` added to the loss.
    Penalty,
    /// Base parameters rescaled to norm at most `clip_norm` after each step.
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogZChoice {
    /// Enumeration up to 20 spins, AIS beyond.
    Auto,
    Exact,
    Ais,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePhase {
    /// Persistent Gibbs chains advanced `pcd_k` sweeps per step.
    Pcd,
    /// Enumerated moments; only for small spin counts.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gibbs sweeps per step for the persistent chains.
    pub pcd_k: usize,
    pub pcd_chains: usize,
    pub l2_coeff: f64,
    pub l2_mode: L2Mode,
    pub clip_norm: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Save a numbered checkpoint every this many epochs (the latest is always kept).
    pub checkpoint_every: usize,
    /// Record elapsed seconds in the metrics; off keeps reruns byte-identical.
    pub wall_clock: bool,
    pub log_z: LogZChoice,
    pub ais_temps: usize,
    pub ais_chains: usize,
    pub negative_phase: NegativePhase,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 20,
            pcd_k: 200,
            pcd_chains: 64,
            l2_coeff: 1e-4,
            l2_mode: L2Mode::Penalty,
            clip_norm: 10.0,
            dropout: 0.2,
            epochs: 200,
            seed: 0,
            checkpoint_every: 50,
            wall_clock: false,
            log_z: LogZChoice::Auto,
            ais_temps: 1000,
            ais_chains: 256,
            negative_phase: NegativePhase::Pcd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: Option<String>,
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: None, path: None, train_size: 1000, test_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Minimal valid configuration for the given base and dataset.
    pub fn new(base: BaseKind, dataset: &str) -> Self {
        let mut c = Self::default();
        c.architecture.base = Some(base);
        c.data.dataset = Some(dataset.to_string());
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture.base.is_none() {
            return Err(Error::Config("missing required field `architecture.base`".into()));
        }
        if self.data.dataset.is_none() {
            return Err(Error::Config("missing required field `data.dataset`".into()));
        }
        self.dataset_id()?;
        let t = &self.training;
        let checks = [
            (t.learning_rate >= 0.0 && t.learning_rate.is_finite(), "training.learning_rate must be non-negative"),
            (t.batch_size >= 1, "training.batch_size must be at least 1"),
            (t.pcd_k >= 1, "training.pcd_k must be at least 1"),
            (t.pcd_chains >= 2, "training.pcd_chains must be at least 2"),
            (t.l2_coeff >= 0.0, "training.l2_coeff must be non-negative"),
            (t.clip_norm > 0.0, "training.clip_norm must be positive"),
            ((0.0..1.0).contains(&t.dropout), "training.dropout must be in [0, 1)"),
            (t.checkpoint_every >= 1, "training.checkpoint_every must be at least 1"),
            (t.ais_temps >= 2 && t.ais_chains >= 2, "training.ais_temps and ais_chains must be at least 2"),
            (self.data.train_size >= 1 && self.data.test_size >= 1, "data sizes must be at least 1"),
            (self.architecture.hidden >= 1, "architecture.hidden must be at least 1"),
            (self.architecture.components >= 1, "architecture.components must be at least 1"),
            (self.architecture.delta.is_none_or(|d| d > 0.0), "architecture.delta must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn base(&self) -> BaseKind {
        self.architecture.base.expect("validated")
    }

    pub fn dataset_id(&self) -> Result<DatasetId> {
        let name = self
            .data
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Config("missing required field `data.dataset`".into()))?;
        DatasetId::parse(name, self.data.path.as_deref())
    }

    /// Model architecture; dequantization only applies to image datasets.
    pub fn model_config(&self, image: bool) -> ModelConfig {
        let a = &self.architecture;
        ModelConfig {
            base: self.base(),
            delta: a.delta,
            flow: FlowConfig {
                coupling: a.coupling,
                hidden: a.hidden,
                components: a.components,
                couplings: a.couplings,
            },
            dequant: if image { a.dequant } else { Dequant::None },
            dequant_couplings: a.dequant_couplings,
            init_coupling_std: a.init_coupling_std,
        }
    }
}
