//! Model, losses, synthetic data and federated-training logic.

pub mod container;
pub mod supervision;
pub mod ucnet;
pub mod losses;
pub mod exam;
pub mod rng;
pub mod synth;
pub mod fed;
pub mod metrics;
pub mod audit;
