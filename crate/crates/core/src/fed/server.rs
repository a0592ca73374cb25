//! Server-side global model, optimizer and round bookkeeping.

use std::path::{Path, PathBuf};

use thiserror::Error;
use ucfed_autograd::Element;

use super::adamw::{adamw_step, AdamWHyper, OptimError, OptimizerState};
use super::aggregate::{AggregateError, Aggregator, BufferGauge};
use super::checkpoint::{checkpoint_path, now_seconds, persist_checkpoint, CheckpointError, CheckpointRecord};
use super::sharable::{weights_sharable, Schema, Sharable, SharableError};
use super::site::Aggregation;
use crate::ucnet::{ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Sharable(#[from] SharableError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("aggregate is for round {found}, server is at round {expected}")]
    RoundMismatch { found: u32, expected: u32 },
}

pub struct ServerState<T> {
    pub model: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed rounds; also the round of the next TASK.
    pub round: u32,
    pub aggregation: Aggregation,
    schema: Schema,
    gauge: BufferGauge,
}

impl<T: Element> ServerState<T> {
    pub fn new(model: ModelParams<T>, hyper: AdamWHyper, aggregation: Aggregation) -> Self {
        let optimizer = OptimizerState::new(&model, hyper);
        Self::from_checkpoint(
            CheckpointRecord {
                round: 0,
                model,
                optimizer,
                created: 0.0,
            },
            aggregation,
        )
    }

    pub fn from_checkpoint(rec: CheckpointRecord<T>, aggregation: Aggregation) -> Self {
        ServerState {
            schema: Schema::of(&rec.model),
            model: rec.model,
            optimizer: rec.optimizer,
            round: rec.round,
            aggregation,
            gauge: BufferGauge::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn gauge(&self) -> &BufferGauge {
        &self.gauge
    }

    /// Current global weights, stamped with the current round.
    pub fn task(&self) -> Sharable {
        weights_sharable(&self.model, self.round)
    }

    pub fn begin_round(&self) -> Aggregator<T> {
        Aggregator::new(
            self.schema.clone(),
            self.aggregation.contribution_kind(),
            self.round,
            self.gauge.clone(),
        )
    }

    /// Applies a round's aggregate: an AdamW step for FedSGD, a weight
    /// replacement for FedAvg. The round advances only on success.
    pub fn apply(&mut self, aggregate: &Sharable) -> Result<(), ServerError> {
        if aggregate.round != self.round {
            return Err(ServerError::RoundMismatch {
                found: aggregate.round,
                expected: self.round,
            });
        }
        let dense = aggregate.to_dense::<T>()?;
        match self.aggregation {
            Aggregation::FedSgd => adamw_step(&mut self.model, &dense, &mut self.optimizer)?,
            Aggregation::FedAvg => {
                self.model = ModelParams::from_trainable(*self.model.config(), dense)?;
            }
        }
        self.round += 1;
        Ok(())
    }

    /// Folds contributions and applies the result in one call.
    pub fn run_round(&mut self, contributions: impl IntoIterator<Item = Sharable>) -> Result<usize, ServerError> {
        let mut agg = self.begin_round();
        for s in contributions {
            if let Err(r) = agg.submit(s) {
                log::warn!("round {}: rejected contribution: {r}", self.round);
            }
        }
        let accepted = agg.accepted();
        let aggregate = agg.finish()?;
        self.apply(&aggregate)?;
        Ok(accepted)
    }

    pub fn checkpoint(&self) -> CheckpointRecord<T> {
        CheckpointRecord {
            round: self.round,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            created: now_seconds(),
        }
    }

    /// Persists when the completed round count is a multiple of `every` or
    /// `force` is set.
    pub fn maybe_persist(&self, dir: &Path, every: u32, force: bool) -> Result<Option<PathBuf>, ServerError> {
        if force || (every > 0 && self.round % every == 0) {
            let path = checkpoint_path(dir, self.round);
            persist_checkpoint(&self.checkpoint(), &path)?;
            return Ok(Some(path));
        }
        Ok(None)
    }
}
