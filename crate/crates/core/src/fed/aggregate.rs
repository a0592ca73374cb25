//! Streaming sample-weighted mean over client contributions.
//!
//! The aggregator keeps one running mean. Each accepted contribution is folded
//! in as `acc += (g − acc) · n_i / (N + n_i)` and dropped, so memory does not
//! grow with the number of clients.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;
use ucfed_autograd::{Dense, Element};

use super::sharable::{validate_contribution, RejectReason, Schema, Sharable, SharableKind};

/// Counts sharable-sized buffers held by an aggregator, and the peak.
#[derive(Debug, Clone, Default)]
pub struct BufferGauge {
    inner: Arc<(AtomicUsize, AtomicUsize)>,
}

impl BufferGauge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self) -> BufferLease {
        let now = self.inner.0.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner.1.fetch_max(now, Ordering::SeqCst);
        BufferLease { gauge: self.clone() }
    }

    pub fn current(&self) -> usize {
        self.inner.0.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.1.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.inner.1.store(self.current(), Ordering::SeqCst);
    }
}

/// One live buffer; released on drop.
#[derive(Debug)]
pub struct BufferLease {
    gauge: BufferGauge,
}

impl Drop for BufferLease {
    fn drop(&mut self) {
        self.gauge.inner.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregateError {
    #[error("round {round}: no accepted contributions at the barrier")]
    NoContributions { round: u32 },
}

pub struct Aggregator<T> {
    schema: Schema,
    kind: SharableKind,
    round: u32,
    acc: Option<(BTreeMap<String, Dense<T>>, BufferLease)>,
    total: u64,
    accepted: usize,
    gauge: BufferGauge,
}

impl<T: Element> Aggregator<T> {
    pub fn new(schema: Schema, kind: SharableKind, round: u32, gauge: BufferGauge) -> Self {
        Aggregator {
            schema,
            kind,
            round,
            acc: None,
            total: 0,
            accepted: 0,
            gauge,
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn accepted(&self) -> usize {
        self.accepted
    }

    pub fn total_samples(&self) -> u64 {
        self.total
    }

    /// Validates and folds one contribution. A rejected contribution leaves
    /// the running mean untouched.
    pub fn submit(&mut self, s: Sharable) -> Result<(), RejectReason> {
        let _incoming = self.gauge.acquire();
        validate_contribution(&s, &self.schema, self.kind, self.round)?;
        let n = s.sample_count as u64;
        let dense = s.to_dense::<T>().expect("validated dtype");
        drop(s);
        match &mut self.acc {
            None => {
                let lease = self.gauge.acquire();
                self.acc = Some((dense, lease));
            }
            Some((acc, _)) => {
                let w = T::from_f64(n as f64 / (self.total + n) as f64);
                for (name, a) in acc.iter_mut() {
                    let g = &dense[name];
                    for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += (y - *x) * w;
                    }
                }
            }
        }
        self.total += n;
        self.accepted += 1;
        Ok(())
    }

    /// The weighted mean, carrying the summed sample count.
    pub fn finish(self) -> Result<Sharable, AggregateError> {
        let (acc, _lease) = self.acc.ok_or(AggregateError::NoContributions { round: self.round })?;
        Ok(Sharable::from_dense(
            self.kind,
            self.round,
            self.total.min(u32::MAX as u64) as u32,
            &acc,
        ))
    }
}

fn aggregate<T: Element>(
    kind: SharableKind,
    contributions: impl IntoIterator<Item = Sharable>,
    schema: &Schema,
    round: u32,
    gauge: &BufferGauge,
) -> Result<(Sharable, Vec<RejectReason>), AggregateError> {
    let mut agg = Aggregator::<T>::new(schema.clone(), kind, round, gauge.clone());
    let mut rejected = Vec::new();
    for s in contributions {
        if let Err(r) = agg.submit(s) {
            log::warn!("round {round}: rejected contribution: {r}");
            rejected.push(r);
        }
    }
    Ok((agg.finish()?, rejected))
}

/// FedSGD: sample-weighted mean of client gradients.
pub fn aggregate_fedsgd<T: Element>(
    contributions: impl IntoIterator<Item = Sharable>,
    schema: &Schema,
    round: u32,
    gauge: &BufferGauge,
) -> Result<(Sharable, Vec<RejectReason>), AggregateError> {
    aggregate::<T>(SharableKind::Gradients, contributions, schema, round, gauge)
}

/// FedAvg: sample-weighted mean of client weights.
pub fn aggregate_fedavg<T: Element>(
    contributions: impl IntoIterator<Item = Sharable>,
    schema: &Schema,
    round: u32,
    gauge: &BufferGauge,
) -> Result<(Sharable, Vec<RejectReason>), AggregateError> {
    aggregate::<T>(SharableKind::Weights, contributions, schema, round, gauge)
}
