//! Federation drivers: a TCP server and client speaking a small framed
//! protocol, and an in-process simulator running the same round logic.

pub mod client;
pub mod config;
pub mod error;
pub mod server;
pub mod session;
pub mod sim;
pub mod wire;

pub use client::{run_client, run_client_with, ClientReport};
pub use config::{FedConfig, Precision, Role};
pub use error::TransportError;
pub use server::{Server, ServerReport};
pub use session::{digest, RoundRecord};
pub use sim::{run_simulation, simulate_sites, RoundEvent, SimError, SimReport};
pub use wire::{MsgType, WireMessage, WireTap};
