//! Client-side round handling shared by every driver.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ucfed_autograd::Element;

use super::adamw::{adamw_step, AdamWHyper, OptimError, OptimizerState};
use super::select::{LogError, Validator};
use super::sharable::{weights_sharable, RejectReason, Schema, Sharable, SharableError, SharableKind};
use super::train::{batch_gradients, local_train_step, BatchOutput, TrainConfig, TrainError};
use crate::exam::Exam;
use crate::synth::DataLoader;
use crate::ucnet::{ModelError, ModelParams, UCNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    FedSgd,
    FedAvg,
}

impl Aggregation {
    pub fn contribution_kind(self) -> SharableKind {
        match self {
            Aggregation::FedSgd => SharableKind::Gradients,
            Aggregation::FedAvg => SharableKind::Weights,
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fedsgd" => Ok(Aggregation::FedSgd),
            "fedavg" => Ok(Aggregation::FedAvg),
            other => Err(format!("unknown aggregation {other:?}, expected fedsgd or fedavg")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SiteError {
    #[error("received weights rejected: {0}")]
    BadWeights(RejectReason),
    #[error(transparent)]
    Sharable(#[from] SharableError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone)]
pub struct SiteConfig {
    pub client_id: u32,
    pub model: UCNetConfig,
    pub train: TrainConfig,
    pub aggregation: Aggregation,
    /// FedAvg only: passes over the local training split per round.
    pub local_epochs: u32,
    /// FedAvg only: the local optimizer.
    pub local_hyper: AdamWHyper,
    pub validate_every: u32,
    /// Where the private validation CSV and candidate weights go.
    pub private_dir: Option<PathBuf>,
}

/// Turns TASK weights into a RESULT contribution and keeps private validation.
pub struct SiteTrainer<T> {
    cfg: SiteConfig,
    schema: Schema,
    loader: DataLoader,
    validator: Validator,
    local_opt: Option<OptimizerState<T>>,
    last: Option<BatchOutput<T>>,
}

impl<T: Element> SiteTrainer<T> {
    pub fn new(cfg: SiteConfig, loader: DataLoader, val: Arc<Vec<Exam>>) -> Result<Self, SiteError> {
        let template = ModelParams::<T>::build(cfg.model)?;
        let validator = Validator::new(cfg.client_id, val, cfg.validate_every, cfg.train, cfg.private_dir.clone());
        Ok(SiteTrainer {
            schema: Schema::of(&template),
            cfg,
            loader,
            validator,
            local_opt: None,
            last: None,
        })
    }

    pub fn client_id(&self) -> u32 {
        self.cfg.client_id
    }

    pub fn sample_count(&self) -> usize {
        self.loader.len_exams()
    }

    /// Checks received weights against this client's model schema.
    pub fn load_weights(&self, s: &Sharable) -> Result<ModelParams<T>, SiteError> {
        let probe = Sharable {
            sample_count: s.sample_count.max(1),
            ..s.clone()
        };
        super::sharable::validate_contribution(&probe, &self.schema, SharableKind::Weights, s.round)
            .map_err(SiteError::BadWeights)?;
        Ok(ModelParams::from_trainable(self.cfg.model, s.to_dense()?)?)
    }

    /// Validates the global model after `weights.round` updates, when due.
    pub fn observe(&mut self, weights: &Sharable) -> Result<(), SiteError> {
        if self.validator.due(weights.round) {
            let model = self.load_weights(weights)?;
            self.validator.observe(weights.round, &model)?;
        }
        Ok(())
    }

    /// One round: validate if due, then train on this round's batch.
    pub fn handle_task(&mut self, task: &Sharable) -> Result<Sharable, SiteError> {
        let model = self.load_weights(task)?;
        if self.validator.due(task.round) {
            self.validator.observe(task.round, &model)?;
        }
        let round = task.round;
        match self.cfg.aggregation {
            Aggregation::FedSgd => {
                let batch = self.loader.batch_for_step(round as u64);
                let (s, out) = local_train_step(&model, &batch, &self.cfg.train, round)?;
                self.last = Some(out);
                Ok(s)
            }
            Aggregation::FedAvg => {
                let mut model = model;
                let hyper = self.cfg.local_hyper;
                let opt = self.local_opt.get_or_insert_with(|| OptimizerState::new(&model, hyper));
                let per_round = self.loader.batches_per_epoch() as u64 * self.cfg.local_epochs.max(1) as u64;
                let mut used = 0usize;
                for j in 0..per_round {
                    let batch = self.loader.batch_for_step(round as u64 * per_round + j);
                    let out = batch_gradients(&model, &batch, &self.cfg.train)?;
                    adamw_step(&mut model, &out.grads, opt)?;
                    used += out.exams_used;
                    self.last = Some(out);
                }
                let mut s = weights_sharable(&model, round);
                s.sample_count = used as u32;
                Ok(s)
            }
        }
    }

    /// Metrics of the most recent local batch.
    pub fn last_batch(&self) -> Option<&BatchOutput<T>> {
        self.last.as_ref()
    }

    pub fn validator(&self) -> &Validator {
        &self.validator
    }
}
