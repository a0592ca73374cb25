//! Server checkpoints: model weights, optimizer moments and step in one
//! container file.
//!
//! Reserved names: `opt.m.<param>`, `opt.v.<param>`, `opt.step`, `opt.hyper`,
//! `meta.config`, `meta.seed`, `meta.created`. The header round is the number
//! of completed rounds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;
use ucfed_autograd::{Dense, Element, Tensor, TensorData};

use super::adamw::{AdamWHyper, OptimizerState};
use crate::container::{kind, Container, DecodeError};
use crate::ucnet::{ModelError, ModelParams, UCNetConfig};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: DecodeError,
    },
    #[error("checkpoint entry {name}: {message}")]
    Entry { name: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord<T> {
    pub round: u32,
    pub model: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    /// Seconds since the Unix epoch.
    pub created: f64,
}

pub fn now_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn entry_err(name: &str, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Entry {
        name: name.into(),
        message: message.into(),
    }
}

impl<T: Element> CheckpointRecord<T> {
    pub fn to_container(&self) -> Container {
        let cfg = self.model.config();
        let mut c = Container::new(kind::WEIGHTS, self.round, 0);
        for (name, d) in self.model.trainable() {
            c.tensors.insert(name.clone(), Tensor::from_dense(d));
        }
        for (name, d) in &self.optimizer.m {
            c.tensors.insert(format!("opt.m.{name}"), Tensor::from_dense(d));
        }
        for (name, d) in &self.optimizer.v {
            c.tensors.insert(format!("opt.v.{name}"), Tensor::from_dense(d));
        }
        c.with("opt.step", Tensor::scalar_f64(self.optimizer.step as f64))
            .with(
                "opt.hyper",
                Tensor::from_dense(&Dense::from_vec(vec![5], self.optimizer.hyper.to_array().to_vec())),
            )
            .with(
                "meta.config",
                Tensor::new(
                    vec![5],
                    TensorData::I32(
                        [cfg.in_channels, cfg.classes, cfg.levels, cfg.base_channels, cfg.kernel]
                            .map(|v| v as i32)
                            .to_vec(),
                    ),
                )
                .expect("five entries"),
            )
            .with(
                "meta.seed",
                Tensor::new(vec![8], TensorData::U8(cfg.seed.to_le_bytes().to_vec())).expect("eight bytes"),
            )
            .with("meta.created", Tensor::scalar_f64(self.created))
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        let get = |name: &str| c.tensors.get(name).ok_or_else(|| entry_err(name, "missing"));
        let cfg_vals = get("meta.config")?
            .as_i32()
            .filter(|v| v.len() == 5 && v.iter().all(|&x| x > 0))
            .ok_or_else(|| entry_err("meta.config", "expected five positive int32 values"))?;
        let seed_bytes = get("meta.seed")?
            .as_u8()
            .filter(|v| v.len() == 8)
            .ok_or_else(|| entry_err("meta.seed", "expected eight bytes"))?;
        let config = UCNetConfig {
            in_channels: cfg_vals[0] as usize,
            classes: cfg_vals[1] as usize,
            levels: cfg_vals[2] as usize,
            base_channels: cfg_vals[3] as usize,
            kernel: cfg_vals[4] as usize,
            seed: u64::from_le_bytes(seed_bytes.try_into().expect("length checked")),
        };
        let scalar = |name: &str| -> Result<f64, CheckpointError> {
            get(name)?
                .as_f64()
                .filter(|v| v.len() == 1)
                .map(|v| v[0])
                .ok_or_else(|| entry_err(name, "expected a float64 scalar"))
        };
        let dense = |name: &str| -> Result<Dense<T>, CheckpointError> {
            get(name)?.to_dense::<T>().map_err(|e| entry_err(name, e.to_string()))
        };
        let hyper = get("opt.hyper")?
            .as_f64()
            .filter(|v| v.len() == 5)
            .ok_or_else(|| entry_err("opt.hyper", "expected five float64 values"))?;
        let step = scalar("opt.step")?;
        if step < 0.0 || step.fract() != 0.0 {
            return Err(entry_err("opt.step", format!("{step} is not a step count")));
        }

        let names = ModelParams::<T>::build(config)?.trainable_names();
        let mut weights = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in &names {
            weights.insert(name.clone(), dense(name)?);
            m.insert(name.clone(), dense(&format!("opt.m.{name}"))?);
            v.insert(name.clone(), dense(&format!("opt.v.{name}"))?);
        }
        let model = ModelParams::from_trainable(config, weights)?;
        for name in &names {
            let shape = model.get(name).expect("trainable").shape();
            if m[name].shape() != shape || v[name].shape() != shape {
                return Err(entry_err(name, "optimizer moment shape differs from parameter"));
            }
        }
        Ok(CheckpointRecord {
            round: c.round,
            model,
            optimizer: OptimizerState {
                step: step as u64,
                m,
                v,
                hyper: AdamWHyper::from_array(hyper.try_into().expect("length checked")),
            },
            created: scalar("meta.created")?,
        })
    }
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial checkpoint.
pub fn persist_checkpoint<T: Element>(record: &CheckpointRecord<T>, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, record.to_container().encode()).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<CheckpointRecord<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let c = Container::decode(&bytes).map_err(|source| CheckpointError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    CheckpointRecord::from_container(&c)
}

/// `<dir>/round-00012.fltc`
pub fn checkpoint_path(dir: &Path, round: u32) -> PathBuf {
    dir.join(format!("round-{round:05}.fltc"))
}

/// Every `round-*.fltc` checkpoint in `dir`, in round order.
pub fn list_checkpoints(dir: &Path) -> Vec<(u32, PathBuf)> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut found: Vec<(u32, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let round = name.strip_prefix("round-")?.strip_suffix(".fltc")?.parse().ok()?;
            Some((round, e.path()))
        })
        .collect();
    found.sort();
    found
}

/// Highest-round checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(u32, PathBuf)> {
    list_checkpoints(dir).pop()
}
