//! Named-tensor payloads exchanged between server and clients, and their
//! acceptance rules.

use std::collections::BTreeMap;

use thiserror::Error;
use ucfed_autograd::{DType, Dense, Element, Tensor};

use crate::container::{kind, Container};
use crate::ucnet::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SharableKind {
    Weights,
    Gradients,
}

impl SharableKind {
    pub fn code(self) -> u8 {
        match self {
            SharableKind::Weights => kind::WEIGHTS,
            SharableKind::Gradients => kind::GRADIENTS,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            kind::WEIGHTS => Some(SharableKind::Weights),
            kind::GRADIENTS => Some(SharableKind::Gradients),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SharableError {
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("container kind {0} is not a sharable")]
    NotSharable(u8),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
}

/// A weights or gradients payload; tensor names are kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sharable {
    pub kind: SharableKind,
    pub round: u32,
    pub sample_count: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Sharable {
    pub fn to_container(&self) -> Container {
        Container {
            kind: self.kind.code(),
            round: self.round,
            sample_count: self.sample_count,
            tensors: self.tensors.clone(),
        }
    }

    pub fn into_container(self) -> Container {
        Container {
            kind: self.kind.code(),
            round: self.round,
            sample_count: self.sample_count,
            tensors: self.tensors,
        }
    }

    pub fn from_container(c: Container) -> Result<Self, SharableError> {
        let kind = SharableKind::from_code(c.kind).ok_or(SharableError::NotSharable(c.kind))?;
        Ok(Sharable {
            kind,
            round: c.round,
            sample_count: c.sample_count,
            tensors: c.tensors,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    /// Typed copies of every tensor. Fails on a dtype mismatch.
    pub fn to_dense<T: Element>(&self) -> Result<BTreeMap<String, Dense<T>>, SharableError> {
        self.tensors
            .iter()
            .map(|(n, t)| {
                t.to_dense::<T>()
                    .map(|d| (n.clone(), d))
                    .map_err(|e| SharableError::Tensor {
                        name: n.clone(),
                        message: e.to_string(),
                    })
            })
            .collect()
    }

    pub fn from_dense<T: Element>(
        kind: SharableKind,
        round: u32,
        sample_count: u32,
        tensors: &BTreeMap<String, Dense<T>>,
    ) -> Self {
        Sharable {
            kind,
            round,
            sample_count,
            tensors: tensors.iter().map(|(n, d)| (n.clone(), Tensor::from_dense(d))).collect(),
        }
    }
}

/// The trainable parameters of a model, as a weights payload.
pub fn weights_sharable<T: Element>(model: &ModelParams<T>, round: u32) -> Sharable {
    Sharable {
        kind: SharableKind::Weights,
        round,
        sample_count: 0,
        tensors: model
            .trainable()
            .map(|(n, d)| (n.clone(), Tensor::from_dense(d)))
            .collect(),
    }
}

/// Packages one client's batch gradients. Frozen parameters are left out.
pub fn extract_gradients<T: Element>(
    model: &ModelParams<T>,
    grads: &BTreeMap<String, Dense<T>>,
    sample_count: u32,
    round: u32,
) -> Result<Sharable, SharableError> {
    let mut tensors = BTreeMap::new();
    for (name, _) in model.trainable() {
        let g = grads
            .get(name)
            .ok_or_else(|| SharableError::MissingGradient(name.clone()))?;
        if !g.all_finite() {
            return Err(SharableError::NonFinite(name.clone()));
        }
        tensors.insert(name.clone(), Tensor::from_dense(g));
    }
    Ok(Sharable {
        kind: SharableKind::Gradients,
        round,
        sample_count,
        tensors,
    })
}

/// Expected names, shapes and dtype of every contribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub dtype: DType,
    pub shapes: BTreeMap<String, Vec<usize>>,
}

impl Schema {
    pub fn of<T: Element>(model: &ModelParams<T>) -> Self {
        Schema {
            dtype: T::DTYPE,
            shapes: model
                .trainable()
                .map(|(n, d)| (n.clone(), d.shape().to_vec()))
                .collect(),
        }
    }
}

/// Why a contribution was refused; none of these reach the accumulator.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RejectReason {
    #[error("expected a {expected:?} payload, got {found:?}")]
    WrongKind { expected: SharableKind, found: SharableKind },
    #[error("stale round {found}, current round is {current}")]
    StaleRound { found: u32, current: u32 },
    #[error("round {found} is ahead of current round {current}")]
    FutureRound { found: u32, current: u32 },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {name}: shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {name}: dtype {found}, expected {expected}")]
    DTypeMismatch {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("parameter {0} has non-finite values")]
    NonFinite(String),
    #[error("contribution carries zero samples")]
    ZeroSamples,
}

impl RejectReason {
    /// Stable machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::WrongKind { .. } => "wrong-kind",
            RejectReason::StaleRound { .. } => "stale-round",
            RejectReason::FutureRound { .. } => "future-round",
            RejectReason::UnknownParameter(_) => "unknown-parameter",
            RejectReason::MissingParameter(_) => "missing-parameter",
            RejectReason::ShapeMismatch { .. } => "shape-mismatch",
            RejectReason::DTypeMismatch { .. } => "dtype-mismatch",
            RejectReason::NonFinite(_) => "non-finite",
            RejectReason::ZeroSamples => "zero-samples",
        }
    }
}

pub fn validate_contribution(
    s: &Sharable,
    schema: &Schema,
    kind: SharableKind,
    round: u32,
) -> Result<(), RejectReason> {
    if s.kind != kind {
        return Err(RejectReason::WrongKind {
            expected: kind,
            found: s.kind,
        });
    }
    if s.round < round {
        return Err(RejectReason::StaleRound {
            found: s.round,
            current: round,
        });
    }
    if s.round > round {
        return Err(RejectReason::FutureRound {
            found: s.round,
            current: round,
        });
    }
    if s.sample_count == 0 {
        return Err(RejectReason::ZeroSamples);
    }
    if let Some(extra) = s.tensors.keys().find(|n| !schema.shapes.contains_key(*n)) {
        return Err(RejectReason::UnknownParameter(extra.clone()));
    }
    for (name, shape) in &schema.shapes {
        let t = s
            .tensors
            .get(name)
            .ok_or_else(|| RejectReason::MissingParameter(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(RejectReason::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        if t.dtype() != schema.dtype {
            return Err(RejectReason::DTypeMismatch {
                name: name.clone(),
                expected: schema.dtype.name(),
                found: t.dtype().name(),
            });
        }
        if !t.all_finite() {
            return Err(RejectReason::NonFinite(name.clone()));
        }
    }
    Ok(())
}
