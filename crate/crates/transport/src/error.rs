use std::io;

use thiserror::Error;
use ucfed_core::container::DecodeError;
use ucfed_core::fed::server::ServerError;
use ucfed_core::fed::sharable::SharableError;
use ucfed_core::fed::site::SiteError;

use crate::session::SetupError;
use crate::wire::{MsgType, WireError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("network: {0}")]
    Io(#[from] io::Error),
    #[error("malformed body: {0}")]
    Body(#[from] DecodeError),
    #[error(transparent)]
    Sharable(#[from] SharableError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Site(#[from] SiteError),
    #[error("unexpected {found:?} message: {context}")]
    Protocol { found: MsgType, context: String },
    #[error("bad JOIN: {0}")]
    BadJoin(String),
    #[error("only {joined} of {expected} clients joined before the deadline")]
    JoinTimeout { joined: usize, expected: usize },
    #[error("round {round}: client {client_id} disconnected again after the retry")]
    RetryExhausted { round: u32, client_id: u32 },
    #[error("round {round}: no message for {seconds}s")]
    Timeout { round: u32, seconds: u64 },
    #[error("could not reach server at {addr} after {attempts} attempts: {source}")]
    Connect {
        addr: String,
        attempts: u32,
        #[source]
        source: io::Error,
    },
}
