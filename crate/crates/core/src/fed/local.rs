//! Non-federated baseline: one site, direct optimizer steps.

use std::sync::Arc;

use ucfed_autograd::Element;

use super::adamw::{adamw_step, AdamWHyper, OptimizerState};
use super::select::Validator;
use super::site::SiteError;
use super::train::{batch_gradients, BatchOutput, TrainConfig};
use crate::exam::Exam;
use crate::losses::LossBreakdown;
use crate::synth::DataLoader;
use crate::ucnet::ModelParams;

pub struct LocalTrainer<T> {
    pub model: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub round: u32,
    pub train: TrainConfig,
    loader: DataLoader,
    validator: Validator,
}

impl<T: Element> LocalTrainer<T> {
    pub fn new(model: ModelParams<T>, hyper: AdamWHyper, train: TrainConfig, loader: DataLoader, validator: Validator) -> Self {
        LocalTrainer {
            optimizer: OptimizerState::new(&model, hyper),
            model,
            round: 0,
            train,
            loader,
            validator,
        }
    }

    pub fn with_state(mut self, optimizer: OptimizerState<T>, round: u32) -> Self {
        self.optimizer = optimizer;
        self.round = round;
        self
    }

    /// One step on the batch for the current round.
    pub fn step(&mut self) -> Result<BatchOutput<T>, SiteError> {
        self.validator.observe(self.round, &self.model)?;
        let batch = self.loader.batch_for_step(self.round as u64);
        let out = batch_gradients(&self.model, &batch, &self.train)?;
        adamw_step(&mut self.model, &out.grads, &mut self.optimizer)?;
        self.round += 1;
        Ok(out)
    }

    /// Runs until `rounds` steps are complete; returns per-step loss terms.
    pub fn run(&mut self, rounds: u32) -> Result<Vec<LossBreakdown>, SiteError> {
        let mut history = Vec::new();
        while self.round < rounds {
            history.push(self.step()?.breakdown);
        }
        self.validator.observe(self.round, &self.model)?;
        Ok(history)
    }

    pub fn validator(&self) -> &Validator {
        &self.validator
    }

    pub fn validation_exams(val: &Arc<Vec<Exam>>) -> usize {
        val.len()
    }
}
