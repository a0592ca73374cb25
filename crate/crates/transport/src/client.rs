//! The site driver: dials out to the server and answers TASKs in order.

use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use ucfed_autograd::Element;
use ucfed_core::container::Container;
use ucfed_core::fed::select::ValidationLogEntry;
use ucfed_core::fed::{Sharable, SiteTrainer};
use ucfed_core::synth::dataset::sha256_hex;

use crate::config::FedConfig;
use crate::error::TransportError;
use crate::server::join_body;
use crate::session::load_site;
use crate::wire::{read_message, write_message, MsgType, WireError, WireMessage};

const BACKOFF_START: Duration = Duration::from_millis(50);
const BACKOFF_MAX: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: u32,
    /// (round, digest) of each TASK trained on. Re-sent TASKs are not repeated.
    pub tasks: Vec<(u32, String)>,
    /// (round, digest) of each RESULT body computed.
    pub results: Vec<(u32, String)>,
    pub validation: Vec<ValidationLogEntry>,
    pub final_weights: Option<Sharable>,
    pub reconnects: u32,
}

/// Dials `addr`, retrying with exponential backoff.
pub fn connect(cfg: &FedConfig) -> Result<TcpStream, TransportError> {
    let mut delay = BACKOFF_START;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match TcpStream::connect(&cfg.server_addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(cfg.io_timeout()))?;
                s.set_write_timeout(Some(cfg.io_timeout()))?;
                return Ok(s);
            }
            Err(source) if attempt > cfg.connect_retries => {
                return Err(TransportError::Connect {
                    addr: cfg.server_addr.clone(),
                    attempts: attempt,
                    source,
                })
            }
            Err(e) => {
                log::debug!("connect attempt {attempt} failed: {e}");
                thread::sleep(delay);
                delay = (delay * 2).min(BACKOFF_MAX);
            }
        }
    }
}

fn join(cfg: &FedConfig, client_id: u32) -> Result<TcpStream, TransportError> {
    let mut s = connect(cfg)?;
    write_message(&mut s, &WireMessage::new(MsgType::Join, 0, join_body(client_id)))?;
    Ok(s)
}

/// Loads the site's data from the config and serves until SHUTDOWN.
pub fn run_client<T: Element>(cfg: &FedConfig) -> Result<ClientReport, TransportError> {
    let site = load_site::<T>(cfg, cfg.client_id)?;
    run_client_with(cfg, site)
}

pub fn run_client_with<T: Element>(cfg: &FedConfig, mut site: SiteTrainer<T>) -> Result<ClientReport, TransportError> {
    let client_id = site.client_id();
    let mut report = ClientReport {
        client_id,
        tasks: Vec::new(),
        results: Vec::new(),
        validation: Vec::new(),
        final_weights: None,
        reconnects: 0,
    };
    // The last answer, keyed by (round, task digest), so a re-broadcast TASK
    // gets the same bytes without training twice.
    let mut cache: Option<(u32, String, Vec<u8>)> = None;
    let mut conn = join(cfg, client_id)?;
    loop {
        let msg = match read_message(&mut conn) {
            Ok(m) => m,
            Err(e) if e.is_disconnect() => {
                log::warn!("client {client_id}: connection lost ({e}); reconnecting");
                report.reconnects += 1;
                conn = join(cfg, client_id)?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        match msg.msg_type {
            MsgType::Task => {
                let task_digest = sha256_hex(&msg.body);
                let body = match &cache {
                    Some((r, d, bytes)) if *r == msg.round && *d == task_digest => bytes.clone(),
                    _ => {
                        let task = Sharable::from_container(Container::decode(&msg.body)?)?;
                        if task.round != msg.round {
                            return Err(TransportError::Protocol {
                                found: MsgType::Task,
                                context: format!("header round {} but weights for round {}", msg.round, task.round),
                            });
                        }
                        let result = site.handle_task(&task)?;
                        let bytes = result.encode();
                        report.tasks.push((msg.round, task_digest.clone()));
                        report.results.push((msg.round, sha256_hex(&bytes)));
                        cache = Some((msg.round, task_digest, bytes.clone()));
                        bytes
                    }
                };
                match write_message(&mut conn, &WireMessage::new(MsgType::Result, msg.round, body)) {
                    Ok(()) => {}
                    Err(e) if e.is_disconnect() || matches!(e, WireError::Io(_)) => {
                        log::warn!("client {client_id}: send failed ({e}); reconnecting");
                        report.reconnects += 1;
                        conn = join(cfg, client_id)?;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            MsgType::Ack => {}
            MsgType::Shutdown => {
                let weights = Sharable::from_container(Container::decode(&msg.body)?)?;
                site.observe(&weights)?;
                report.final_weights = Some(weights);
                break;
            }
            other => {
                return Err(TransportError::Protocol {
                    found: other,
                    context: "clients only receive TASK, ACK and SHUTDOWN".into(),
                })
            }
        }
    }
    report.validation = site.validator().log().to_vec();
    Ok(report)
}
