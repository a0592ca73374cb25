//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ucfed_autograd::{Dense, Element};

use crate::ucnet::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 0.0015,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWHyper {
    pub fn to_array(&self) -> [f64; 5] {
        [self.lr, self.beta1, self.beta2, self.eps, self.weight_decay]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        AdamWHyper {
            lr: a[0],
            beta1: a[1],
            beta2: a[2],
            eps: a[3],
            weight_decay: a[4],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptimError {
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("gradient for {name} has shape {found:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("update of {0} is not finite")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Dense<T>>,
    pub v: BTreeMap<String, Dense<T>>,
    pub hyper: AdamWHyper,
}

impl<T: Element> OptimizerState<T> {
    /// Zero moments for every trainable parameter.
    pub fn new(model: &ModelParams<T>, hyper: AdamWHyper) -> Self {
        let zeros: BTreeMap<String, Dense<T>> = model
            .trainable()
            .map(|(n, d)| (n.clone(), Dense::zeros(d.shape().to_vec())))
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            hyper,
        }
    }
}

/// One AdamW update of every trainable parameter.
///
/// The whole update is computed before anything is written, so a non-finite
/// result leaves both the model and the state unchanged.
pub fn adamw_step<T: Element>(
    model: &mut ModelParams<T>,
    grads: &BTreeMap<String, Dense<T>>,
    state: &mut OptimizerState<T>,
) -> Result<(), OptimError> {
    let h = state.hyper;
    let t = state.step + 1;
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - h.beta1), T::from_f64(1.0 - h.beta2));
    let (c1, c2) = (T::from_f64(bc1), T::from_f64(bc2));
    let decay = T::from_f64(1.0 - h.lr * h.weight_decay);
    let (lr, eps) = (T::from_f64(h.lr), T::from_f64(h.eps));

    let mut staged = Vec::new();
    for (name, theta) in model.trainable() {
        let g = grads
            .get(name)
            .ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
        if g.shape() != theta.shape() {
            return Err(OptimError::Shape {
                name: name.clone(),
                expected: theta.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        let (m0, v0) = (&state.m[name], &state.v[name]);
        let n = theta.len();
        let (mut p, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = b1 * m0.data()[i] + one_b1 * gi;
            let vi = b2 * v0.data()[i] + one_b2 * gi * gi;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            p.push(theta.data()[i] * decay - lr * m_hat / (v_hat.sqrt() + eps));
            m.push(mi);
            v.push(vi);
        }
        if p.iter().chain(&m).chain(&v).any(|x| !x.is_finite()) {
            return Err(OptimError::NonFinite(name.clone()));
        }
        let shape = theta.shape().to_vec();
        staged.push((
            name.clone(),
            Dense::from_vec(shape.clone(), p),
            Dense::from_vec(shape.clone(), m),
            Dense::from_vec(shape, v),
        ));
    }
    for (name, p, m, v) in staged {
        model.set(&name, p).expect("trainable name and shape");
        state.m.insert(name.clone(), m);
        state.v.insert(name, v);
    }
    state.step = t;
    Ok(())
}
