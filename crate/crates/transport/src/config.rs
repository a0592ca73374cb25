//! The single TOML experiment file shared by every role.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ucfed_core::fed::{AdamWHyper, Aggregation, SiteConfig, TrainConfig};
use ucfed_core::losses::{LossConfig, MultiTaskWeights};
use ucfed_core::ucnet::UCNetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown config key {key:?}; valid keys: {}", KEYS.join(", "))]
    UnknownKey { key: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Server,
    Client,
    #[default]
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One path, or one per site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathList {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl Default for PathList {
    fn default() -> Self {
        PathList::Many(Vec::new())
    }
}

impl PathList {
    pub fn as_slice(&self) -> &[PathBuf] {
        match self {
            PathList::One(p) => std::slice::from_ref(p),
            PathList::Many(v) => v,
        }
    }
}

pub const KEYS: &[&str] = &[
    "role",
    "server_addr",
    "n_clients",
    "rounds",
    "batch_size",
    "lr",
    "lambda",
    "alpha_policy",
    "seed",
    "dataset_dir",
    "checkpoint_dir",
    "validate_every",
    "checkpoint_every",
    "aggregation",
    "local_epochs",
    "client_id",
    "classes",
    "base_channels",
    "levels",
    "precision",
    "augment",
    "private_dir",
    "connect_retries",
    "io_timeout_secs",
    "resume",
    "skip_corrupt",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub role: Role,
    pub server_addr: String,
    pub n_clients: u32,
    pub rounds: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: [f64; 4],
    /// Policy half of α, in the order region, histogram, lesion map, segmentation.
    pub alpha_policy: [bool; 4],
    pub seed: u64,
    pub dataset_dir: PathList,
    pub checkpoint_dir: PathBuf,
    pub validate_every: u32,
    pub checkpoint_every: u32,
    pub aggregation: Aggregation,
    pub local_epochs: u32,
    pub client_id: u32,
    pub classes: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub precision: Precision,
    pub augment: bool,
    /// Site-private output; defaults to `checkpoint_dir/site-<id>`.
    pub private_dir: Option<PathBuf>,
    pub connect_retries: u32,
    pub io_timeout_secs: u64,
    pub resume: bool,
    pub skip_corrupt: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        let net = UCNetConfig::default();
        let w = MultiTaskWeights::default();
        FedConfig {
            role: Role::default(),
            server_addr: "127.0.0.1:7070".into(),
            n_clients: 2,
            rounds: 10,
            batch_size: 2,
            lr: AdamWHyper::default().lr,
            lambda: w.lambda,
            alpha_policy: w.policy,
            seed: 0,
            dataset_dir: PathList::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            validate_every: 0,
            checkpoint_every: 0,
            aggregation: Aggregation::FedSgd,
            local_epochs: 1,
            client_id: 0,
            classes: net.classes,
            base_channels: net.base_channels,
            levels: net.levels,
            precision: Precision::default(),
            augment: false,
            private_dir: None,
            connect_retries: 6,
            io_timeout_secs: 600,
            resume: false,
            skip_corrupt: false,
        }
    }
}

impl FedConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides written in TOML value syntax.
    pub fn with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (key, raw) in overrides {
            let value = parse_value(raw);
            table.insert(key.clone(), value);
        }
        if let Some(key) = table.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey { key: key.clone() });
        }
        let cfg: FedConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, message: &str| {
            Err(ConfigError::Invalid {
                key,
                message: message.into(),
            })
        };
        if self.n_clients == 0 {
            return bad("n_clients", "need at least one client");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be a positive number");
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambda", "weights must be finite and nonnegative");
        }
        if !(2..=6).contains(&self.classes) {
            return bad("classes", "must be between 2 and 6");
        }
        if self.base_channels == 0 || self.levels == 0 {
            return bad("base_channels", "network width and depth must be positive");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1");
        }
        let dirs = self.dataset_dir.as_slice().len();
        if dirs > 1 && dirs != self.n_clients as usize {
            return bad("dataset_dir", "a list must have one entry per client");
        }
        Ok(())
    }

    pub fn model_config(&self) -> UCNetConfig {
        UCNetConfig {
            classes: self.classes,
            base_channels: self.base_channels,
            levels: self.levels,
            seed: self.seed,
            ..UCNetConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: MultiTaskWeights {
                lambda: self.lambda,
                policy: self.alpha_policy,
            },
            loss: LossConfig::default(),
        }
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            ..AdamWHyper::default()
        }
    }

    pub fn private_dir_for(&self, client_id: u32) -> PathBuf {
        self.private_dir
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir.join(format!("site-{client_id}")))
    }

    pub fn site_config(&self, client_id: u32) -> SiteConfig {
        SiteConfig {
            client_id,
            model: self.model_config(),
            train: self.train_config(),
            aggregation: self.aggregation,
            local_epochs: self.local_epochs,
            local_hyper: self.hyper(),
            validate_every: self.validate_every,
            private_dir: Some(self.private_dir_for(client_id)),
        }
    }

    /// The dataset of `client_id`: the single entry, or the list entry at that index.
    pub fn dataset_for(&self, client_id: u32) -> Result<&Path, ConfigError> {
        let dirs = self.dataset_dir.as_slice();
        match dirs {
            [] => Err(ConfigError::Invalid {
                key: "dataset_dir",
                message: "no dataset configured".into(),
            }),
            [one] => Ok(one),
            many => many.get(client_id as usize).map(PathBuf::as_path).ok_or(ConfigError::Invalid {
                key: "dataset_dir",
                message: format!("no entry for client {client_id}"),
            }),
        }
    }

    pub fn io_timeout(&self) -> Duration {
        Duration::from_secs(self.io_timeout_secs.max(1))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    doc.parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
