//! Transport-independent federation logic.

pub mod adamw;
pub mod aggregate;
pub mod checkpoint;
pub mod local;
pub mod select;
pub mod server;
pub mod sharable;
pub mod site;
pub mod train;

pub use adamw::{adamw_step, AdamWHyper, OptimizerState};
pub use aggregate::{aggregate_fedavg, aggregate_fedsgd, Aggregator, BufferGauge};
pub use checkpoint::{load_checkpoint, persist_checkpoint, CheckpointRecord};
pub use select::{select_checkpoint, ValidationLogEntry, Validator};
pub use server::ServerState;
pub use sharable::{extract_gradients, validate_contribution, RejectReason, Schema, Sharable, SharableKind};
pub use site::{Aggregation, SiteConfig, SiteTrainer};
pub use train::{local_train_step, TrainConfig};
