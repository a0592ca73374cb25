//! One client's contribution: mean gradient of the multi-task loss over a batch.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;
use ucfed_autograd::{Dense, Element, Graph};

use super::sharable::{extract_gradients, Sharable, SharableError};
use crate::exam::Exam;
use crate::losses::{multitask_loss, LossBreakdown, LossConfig, LossError, MultiTaskWeights};
use crate::ucnet::{forward, ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainConfig {
    pub weights: MultiTaskWeights,
    pub loss: LossConfig,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("batch has no supervised exam ({skipped} skipped)")]
    NoSupervisedExam { skipped: usize },
    #[error("exam {exam}: {source}")]
    Exam {
        exam: String,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Sharable(#[from] SharableError),
}

/// Loss and parameter gradients for one exam.
pub fn exam_gradients<T: Element>(
    model: &ModelParams<T>,
    exam: &Exam,
    cfg: &TrainConfig,
) -> Result<(BTreeMap<String, Dense<T>>, LossBreakdown), LossError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(exam.image_as::<T>());
    let out = forward(&mut g, &bound, model.config(), x)?;
    let (loss, bd) = multitask_loss(&mut g, &out, &bound, &exam.targets(), &cfg.weights, &cfg.loss)?;
    let grads = g.backward(loss)?;
    let map = bound
        .iter()
        .filter(|(n, _)| !ModelParams::<T>::is_frozen(n))
        .map(|(n, &v)| (n.clone(), grads.wrt(&g, v)))
        .collect();
    Ok((map, bd))
}

/// Loss terms of one exam without a backward pass.
pub fn exam_loss<T: Element>(model: &ModelParams<T>, exam: &Exam, cfg: &TrainConfig) -> Result<LossBreakdown, LossError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(exam.image_as::<T>());
    let out = forward(&mut g, &bound, model.config(), x)?;
    Ok(multitask_loss(&mut g, &out, &bound, &exam.targets(), &cfg.weights, &cfg.loss)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<T> {
    pub grads: BTreeMap<String, Dense<T>>,
    /// Mean over the exams that contributed.
    pub breakdown: LossBreakdown,
    pub exams_used: usize,
    /// `(exam id, reason)` for exams without usable supervision.
    pub skipped: Vec<(String, String)>,
}

/// Elementwise mean of per-exam breakdowns; α is the union.
pub fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    for b in items {
        out.region_classifier += b.region_classifier / n;
        out.hist_strong += b.hist_strong / n;
        out.hist_high += b.hist_high / n;
        out.ggmap += b.ggmap / n;
        out.dice += b.dice / n;
        out.bce += b.bce / n;
        out.total += b.total / n;
        out.lambda = b.lambda;
        for i in 0..4 {
            out.alpha[i] |= b.alpha[i];
        }
    }
    out
}

/// Mean gradient over the supervised exams of a batch.
///
/// Exams run in parallel; gradients are summed in batch order, so the result
/// does not depend on scheduling.
pub fn batch_gradients<T: Element>(
    model: &ModelParams<T>,
    batch: &[Exam],
    cfg: &TrainConfig,
) -> Result<BatchOutput<T>, TrainError> {
    let results: Vec<Result<_, LossError>> = batch.par_iter().map(|e| exam_gradients(model, e, cfg)).collect();
    let mut sum: Option<BTreeMap<String, Dense<T>>> = None;
    let mut breakdowns = Vec::new();
    let mut skipped = Vec::new();
    for (exam, r) in batch.iter().zip(results) {
        match r {
            Ok((grads, bd)) => {
                breakdowns.push(bd);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, a) in acc.iter_mut() {
                            for (x, &y) in a.data_mut().iter_mut().zip(grads[name].data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Err(LossError::NoSupervision) | Err(LossError::Model(ModelError::NoSupervisedRegion)) => {
                log::info!("skipping unsupervised exam {}", exam.id());
                skipped.push((exam.id().to_string(), LossError::NoSupervision.to_string()));
            }
            Err(e) => {
                return Err(TrainError::Exam {
                    exam: exam.id().into(),
                    source: e,
                })
            }
        }
    }
    let n = breakdowns.len();
    let mut grads = sum.ok_or(TrainError::NoSupervisedExam { skipped: skipped.len() })?;
    if n > 1 {
        let inv = T::from_f64(n as f64);
        for d in grads.values_mut() {
            d.data_mut().iter_mut().for_each(|x| *x = *x / inv);
        }
    }
    Ok(BatchOutput {
        grads,
        breakdown: mean_breakdown(&breakdowns),
        exams_used: n,
        skipped,
    })
}

/// A client's gradient contribution for one round.
pub fn local_train_step<T: Element>(
    model: &ModelParams<T>,
    batch: &[Exam],
    cfg: &TrainConfig,
    round: u32,
) -> Result<(Sharable, BatchOutput<T>), TrainError> {
    let out = batch_gradients(model, batch, cfg)?;
    let s = extract_gradients(model, &out.grads, out.exams_used as u32, round)?;
    Ok((s, out))
}
