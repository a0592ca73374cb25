//! Setup and round bookkeeping shared by the TCP drivers and the simulator.

use std::sync::Arc;

use thiserror::Error;
use ucfed_autograd::Element;
use ucfed_core::exam::Exam;
use ucfed_core::fed::checkpoint::{latest_checkpoint, CheckpointError};
use ucfed_core::fed::server::ServerError;
use ucfed_core::fed::site::SiteError;
use ucfed_core::fed::{load_checkpoint, ServerState, Sharable, SiteTrainer};
use ucfed_core::rng::derive_seed;
use ucfed_core::synth::dataset::{load_split, sha256_hex, CorruptPolicy, DatasetError};
use ucfed_core::synth::DataLoader;
use ucfed_core::ucnet::{ModelError, ModelParams};

use crate::config::{ConfigError, FedConfig};

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Site(#[from] SiteError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Hex SHA-256 of a payload's canonical encoding.
pub fn digest(s: &Sharable) -> String {
    sha256_hex(&s.encode())
}

/// One accepted or rejected RESULT within a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contribution {
    pub client_id: u32,
    pub digest: String,
    pub sample_count: u32,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: u32,
    /// Digest of the global weights broadcast for this round.
    pub task_digest: String,
    /// In client-id order.
    pub contributions: Vec<Contribution>,
}

impl RoundRecord {
    /// Sorted digests of the accepted contributions.
    pub fn accepted_multiset(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .contributions
            .iter()
            .filter(|c| c.accepted)
            .map(|c| c.digest.clone())
            .collect();
        v.sort();
        v
    }
}

pub fn policy(cfg: &FedConfig) -> CorruptPolicy {
    if cfg.skip_corrupt {
        CorruptPolicy::SkipWithReport
    } else {
        CorruptPolicy::FailFast
    }
}

/// Loads a site's train and val splits and builds its trainer.
pub fn load_site<T: Element>(cfg: &FedConfig, client_id: u32) -> Result<SiteTrainer<T>, SetupError> {
    let dir = cfg.dataset_for(client_id)?;
    let train = load_split(dir, "train", policy(cfg))?.exams;
    // A site without a validation split trains but never logs.
    let val = match load_split(dir, "val", policy(cfg)) {
        Ok(s) => s.exams,
        Err(DatasetError::EmptySplit(_)) => Vec::new(),
        Err(_) if !dir.join("val").exists() => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    site_from_exams(cfg, client_id, train, val)
}

/// Builds a trainer over in-memory exams, seeded as [`load_site`] would be.
pub fn site_from_exams<T: Element>(
    cfg: &FedConfig,
    client_id: u32,
    train: Vec<Exam>,
    val: Vec<Exam>,
) -> Result<SiteTrainer<T>, SetupError> {
    let loader = site_loader(cfg, client_id, Arc::new(train));
    Ok(SiteTrainer::new(cfg.site_config(client_id), loader, Arc::new(val))?)
}

pub fn site_loader(cfg: &FedConfig, client_id: u32, train: Arc<Vec<Exam>>) -> DataLoader {
    DataLoader::new(train, cfg.batch_size, cfg.augment, derive_seed(cfg.seed, &[client_id as u64]))
}

/// Fresh global state, or the latest checkpoint when `resume` is set and one exists.
pub fn initial_server_state<T: Element>(cfg: &FedConfig) -> Result<ServerState<T>, SetupError> {
    if cfg.resume {
        if let Some((round, path)) = latest_checkpoint(&cfg.checkpoint_dir) {
            log::info!("resuming from {} (round {round})", path.display());
            let rec = load_checkpoint::<T>(&path)?;
            return Ok(ServerState::from_checkpoint(rec, cfg.aggregation));
        }
    }
    let model = ModelParams::<T>::build(cfg.model_config())?;
    Ok(ServerState::new(model, cfg.hyper(), cfg.aggregation))
}

/// Folds one round's RESULTs in client-id order and applies the aggregate.
pub fn close_round<T: Element>(
    state: &mut ServerState<T>,
    task_digest: String,
    results: Vec<(u32, Sharable)>,
) -> Result<RoundRecord, ServerError> {
    let round = state.round;
    let mut results = results;
    results.sort_by_key(|(id, _)| *id);
    let mut agg = state.begin_round();
    let mut contributions = Vec::with_capacity(results.len());
    for (client_id, s) in results {
        let digest = digest(&s);
        let sample_count = s.sample_count;
        let accepted = match agg.submit(s) {
            Ok(()) => true,
            Err(reason) => {
                log::warn!("round {round}: client {client_id} rejected: {reason}");
                false
            }
        };
        contributions.push(Contribution {
            client_id,
            digest,
            sample_count,
            accepted,
        });
    }
    let aggregate = agg.finish()?;
    state.apply(&aggregate)?;
    Ok(RoundRecord {
        round,
        task_digest,
        contributions,
    })
}
