//! Experiment configuration: TOML (or its JSON mirror), with defaults and
//! validation. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fgl::FglHyper;
use crate::graph::{SbmConfig, SplitRatios};
use crate::partition::Partitioner;
use crate::protocol::{ServerOptions, Strategy};

/// Default drop rate for the sparsity perturbations.
pub const DEFAULT_DROP_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    File { path: PathBuf },
    Sbm(SbmConfig),
}

fn default_drop_rate() -> f64 {
    DEFAULT_DROP_RATE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    #[default]
    None,
    LabelSparsity {
        #[serde(default = "default_drop_rate")]
        rate: f64,
    },
    EdgeSparsity {
        #[serde(default = "default_drop_rate")]
        rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Forces `α = 0`.
    #[serde(default)]
    pub disable_staleness: bool,
    #[serde(default)]
    pub disable_clustercast: bool,
    /// Every cluster collapses to the client itself.
    #[serde(default)]
    pub disable_sfm_clustering: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_partitioner")]
    pub partitioner: Partitioner,
    pub n_clients: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Upload threshold; `⌈n_clients / 2⌉` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub hyper: FglHyper,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_max_trips")]
    pub max_trips: u64,
    #[serde(default = "default_edge_fraction")]
    pub edge_fraction: f64,
    #[serde(default = "default_lag_range")]
    pub lag_range: (u64, u64),
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Also write a per-seed delivery trace.
    #[serde(default)]
    pub write_trace: bool,
}

fn default_partitioner() -> Partitioner {
    Partitioner::Louvain
}
fn default_strategy() -> Strategy {
    Strategy::FedSaGcl
}
fn default_lr() -> f64 {
    0.01
}
fn default_hidden_dim() -> usize {
    64
}
fn default_max_trips() -> u64 {
    2000
}
fn default_edge_fraction() -> f64 {
    0.3
}
fn default_lag_range() -> (u64, u64) {
    (2, 5)
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn with_defaults(dataset: DatasetSpec, n_clients: usize) -> Self {
        Self {
            dataset,
            partitioner: default_partitioner(),
            n_clients,
            strategy: default_strategy(),
            k: None,
            hyper: FglHyper::default(),
            lr: default_lr(),
            hidden_dim: default_hidden_dim(),
            max_trips: default_max_trips(),
            edge_fraction: default_edge_fraction(),
            lag_range: default_lag_range(),
            split: SplitRatios::default(),
            perturbation: Perturbation::None,
            ablation: Ablation::default(),
            seeds: default_seeds(),
            target_accuracy: None,
            output_dir: default_output_dir(),
            write_trace: false,
        }
    }

    pub fn buffer_k(&self) -> usize {
        self.k.unwrap_or(self.n_clients.div_ceil(2))
    }

    /// Hyperparameters after applying ablation switches.
    pub fn effective_hyper(&self) -> FglHyper {
        let mut h = self.hyper;
        if self.ablation.disable_staleness {
            h.alpha = 0.0;
        }
        h
    }

    pub fn server_options(&self) -> ServerOptions {
        ServerOptions {
            clustercast: !self.ablation.disable_clustercast,
            sfm_clustering: !self.ablation.disable_sfm_clustering,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Sbm(sbm) = &self.dataset {
            sbm.validate()?;
        }
        if self.n_clients < 1 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if self.k == Some(0) {
            return Err(Error::config("k", "must be at least 1"));
        }
        self.hyper.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.hidden_dim < 1 {
            return Err(Error::config("hidden_dim", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.edge_fraction) {
            return Err(Error::config("edge_fraction", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.lag_range;
        if lo < 1 || lo > hi {
            return Err(Error::config("lag_range", "needs 1 <= lo <= hi"));
        }
        self.split.validate()?;
        match self.perturbation {
            Perturbation::LabelSparsity { rate } | Perturbation::EdgeSparsity { rate }
                if !(0.0..=1.0).contains(&rate) =>
            {
                return Err(Error::config("perturbation.rate", "must lie in [0, 1]"));
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config("target_accuracy", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(key, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg.split('`').nth(1).unwrap_or("config").to_string();
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
