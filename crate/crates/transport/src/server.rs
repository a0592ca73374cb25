//! The aggregation server: accepts N sites, then runs synchronous rounds.
//!
//! One reader thread per connection feeds a single event queue; the round
//! loop owns the writers, the global state and the barrier.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use ucfed_autograd::{Element, Tensor, TensorData};
use ucfed_core::container::{kind, Container};
use ucfed_core::fed::{ServerState, Sharable};
use ucfed_core::synth::dataset::sha256_hex;

use crate::config::FedConfig;
use crate::error::TransportError;
use crate::session::{close_round, initial_server_state, Contribution, RoundRecord};
use crate::wire::{read_message, write_message, Direction, MsgType, WireMessage, WireTap};

/// Tensor name carrying the client id in a JOIN body.
pub const CLIENT_ID_TENSOR: &str = "client.id";

const ACCEPT_POLL: Duration = Duration::from_millis(5);

pub fn join_body(client_id: u32) -> Vec<u8> {
    let id = Tensor::new(vec![1], TensorData::I32(vec![client_id as i32])).expect("one element");
    Container::new(kind::DATA, 0, 0).with(CLIENT_ID_TENSOR, id).encode()
}

pub fn parse_join(body: &[u8]) -> Result<u32, TransportError> {
    let c = Container::decode(body)?;
    match c.tensors.get(CLIENT_ID_TENSOR).map(Tensor::data) {
        Some(TensorData::I32(v)) if v.len() == 1 && v[0] >= 0 => Ok(v[0] as u32),
        _ => Err(TransportError::BadJoin(format!("missing {CLIENT_ID_TENSOR}"))),
    }
}

enum Event {
    Message { client_id: u32, generation: u64, msg: WireMessage },
    Gone { client_id: u32, generation: u64, reason: String },
}

struct Peer {
    stream: TcpStream,
    generation: u64,
}

pub struct ServerReport<T> {
    pub state: ServerState<T>,
    pub rounds: Vec<RoundRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Rounds that were aborted and re-broadcast after a disconnect.
    pub retries: u32,
}

pub struct Server {
    hub: Hub,
    events: Receiver<Event>,
}

struct Hub {
    cfg: FedConfig,
    listener: TcpListener,
    tap: Option<WireTap>,
    peers: BTreeMap<u32, Peer>,
    sender: Sender<Event>,
    generation: u64,
}

impl Server {
    pub fn bind(cfg: FedConfig) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(&cfg.server_addr)?;
        listener.set_nonblocking(true)?;
        let (sender, events) = mpsc::channel();
        Ok(Server {
            hub: Hub {
                cfg,
                listener,
                tap: None,
                peers: BTreeMap::new(),
                sender,
                generation: 0,
            },
            events,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.hub.listener.local_addr().expect("bound listener")
    }

    /// Records every frame sent or received.
    pub fn with_tap(mut self, tap: WireTap) -> Self {
        self.hub.tap = Some(tap);
        self
    }

    pub fn run<T: Element>(self) -> Result<ServerReport<T>, TransportError> {
        let Server { mut hub, events } = self;
        let cfg = hub.cfg.clone();
        let mut state = initial_server_state::<T>(&cfg)?;
        let timeout = cfg.io_timeout();

        let deadline = Instant::now() + timeout;
        while hub.peers.len() < cfg.n_clients as usize {
            hub.accept_join(deadline, None)?;
        }
        log::info!("{} clients joined", hub.peers.len());

        let mut rounds = Vec::new();
        let mut checkpoints = Vec::new();
        let mut retries = 0u32;
        while state.round < cfg.rounds {
            let round = state.round;
            let task = WireMessage::new(MsgType::Task, round, state.task().encode());
            let task_digest = sha256_hex(&task.body);
            let mut retried = false;
            let results = 'attempt: loop {
                if let Some(id) = hub.broadcast(&task) {
                    hub.recover(id, round, &mut retried)?;
                    retries += 1;
                    continue 'attempt;
                }
                let mut got: BTreeMap<u32, Result<Sharable, String>> = BTreeMap::new();
                while got.len() < hub.peers.len() {
                    let event = match events.recv_timeout(timeout) {
                        Ok(e) => e,
                        Err(RecvTimeoutError::Timeout) => {
                            return Err(TransportError::Timeout {
                                round,
                                seconds: timeout.as_secs(),
                            })
                        }
                        Err(RecvTimeoutError::Disconnected) => unreachable!("hub holds a sender"),
                    };
                    match event {
                        Event::Gone {
                            client_id,
                            generation,
                            reason,
                        } if hub.is_current(client_id, generation) => {
                            log::warn!("round {round}: client {client_id} lost ({reason}); aborting round");
                            hub.recover(client_id, round, &mut retried)?;
                            retries += 1;
                            continue 'attempt;
                        }
                        Event::Message {
                            client_id,
                            generation,
                            msg,
                        } if hub.is_current(client_id, generation) => match msg.msg_type {
                            MsgType::Result if msg.round != round => {
                                log::warn!(
                                    "round {round}: client {client_id} sent a RESULT for round {}; rejected",
                                    msg.round
                                );
                            }
                            MsgType::Result if got.contains_key(&client_id) => {}
                            MsgType::Result => {
                                let parsed = Container::decode(&msg.body)
                                    .map_err(|e| e.to_string())
                                    .and_then(|c| Sharable::from_container(c).map_err(|e| e.to_string()));
                                if hub.send(client_id, &WireMessage::empty(MsgType::Ack, round)).is_err() {
                                    log::warn!("round {round}: ACK to client {client_id} failed");
                                }
                                got.insert(client_id, parsed.map_err(|e| format!("{e}; body {}", sha256_hex(&msg.body))));
                            }
                            other => log::warn!("round {round}: ignoring {other:?} from client {client_id}"),
                        },
                        _ => {}
                    }
                }
                break got;
            };

            let mut rejected = Vec::new();
            let mut accepted = Vec::new();
            for (id, r) in results {
                match r {
                    Ok(s) => accepted.push((id, s)),
                    Err(e) => {
                        log::warn!("round {round}: client {id} sent an unreadable RESULT: {e}");
                        rejected.push(Contribution {
                            client_id: id,
                            digest: String::new(),
                            sample_count: 0,
                            accepted: false,
                        });
                    }
                }
            }
            let mut record = close_round(&mut state, task_digest, accepted)?;
            record.contributions.extend(rejected);
            record.contributions.sort_by_key(|c| c.client_id);
            rounds.push(record);
            let last = state.round == cfg.rounds;
            if let Some(p) = state.maybe_persist(&cfg.checkpoint_dir, cfg.checkpoint_every, last)? {
                checkpoints.push(p);
            }
        }

        let bye = WireMessage::new(MsgType::Shutdown, state.round, state.task().encode());
        if let Some(id) = hub.broadcast(&bye) {
            log::warn!("client {id} was gone before SHUTDOWN");
        }
        Ok(ServerReport {
            state,
            rounds,
            checkpoints,
            retries,
        })
    }
}

impl Hub {
    fn is_current(&self, client_id: u32, generation: u64) -> bool {
        self.peers.get(&client_id).is_some_and(|p| p.generation == generation)
    }

    fn record(&self, direction: Direction, client_id: Option<u32>, msg: &WireMessage) {
        if let Some(tap) = &self.tap {
            tap.record(direction, client_id, msg);
        }
    }

    fn send(&mut self, client_id: u32, msg: &WireMessage) -> Result<(), TransportError> {
        let peer = self.peers.get_mut(&client_id).expect("known peer");
        write_message(&mut peer.stream, msg)?;
        self.record(Direction::Sent, Some(client_id), msg);
        Ok(())
    }

    /// Sends to every peer in id order; returns the first peer that failed.
    fn broadcast(&mut self, msg: &WireMessage) -> Option<u32> {
        let ids: Vec<u32> = self.peers.keys().copied().collect();
        ids.into_iter().find(|&id| self.send(id, msg).is_err())
    }

    /// Waits for one JOIN. With `want`, only that client id is taken back.
    fn accept_join(&mut self, deadline: Instant, want: Option<u32>) -> Result<u32, TransportError> {
        let expected = self.cfg.n_clients as usize;
        loop {
            let stream = match self.listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::JoinTimeout {
                            joined: self.peers.len().min(expected),
                            expected,
                        });
                    }
                    thread::sleep(ACCEPT_POLL);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            match self.handshake(stream, want) {
                Ok(id) => return Ok(id),
                Err(e) => log::warn!("refused connection: {e}"),
            }
        }
    }

    fn handshake(&mut self, mut stream: TcpStream, want: Option<u32>) -> Result<u32, TransportError> {
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.cfg.io_timeout()))?;
        stream.set_write_timeout(Some(self.cfg.io_timeout()))?;
        let msg = read_message(&mut stream)?;
        self.record(Direction::Received, None, &msg);
        if msg.msg_type != MsgType::Join {
            return Err(TransportError::Protocol {
                found: msg.msg_type,
                context: "expected JOIN".into(),
            });
        }
        let id = parse_join(&msg.body)?;
        match want {
            Some(w) if w != id => return Err(TransportError::BadJoin(format!("client {id} while waiting for {w}"))),
            None if self.peers.contains_key(&id) => {
                return Err(TransportError::BadJoin(format!("client {id} already joined")))
            }
            None if self.peers.len() >= self.cfg.n_clients as usize => {
                return Err(TransportError::BadJoin("federation is full".into()))
            }
            _ => {}
        }
        // Idle gaps between rounds are legitimate; the round loop owns timeouts.
        stream.set_read_timeout(None)?;
        self.generation += 1;
        let generation = self.generation;
        let reader = stream.try_clone()?;
        self.spawn_reader(id, generation, reader);
        self.peers.insert(id, Peer { stream, generation });
        log::info!("client {id} joined");
        Ok(id)
    }

    fn spawn_reader(&self, client_id: u32, generation: u64, mut stream: TcpStream) {
        let sender = self.sender.clone();
        let tap = self.tap.clone();
        thread::spawn(move || loop {
            match read_message(&mut stream) {
                Ok(msg) => {
                    if let Some(tap) = &tap {
                        tap.record(Direction::Received, Some(client_id), &msg);
                    }
                    let event = Event::Message {
                        client_id,
                        generation,
                        msg,
                    };
                    if sender.send(event).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = sender.send(Event::Gone {
                        client_id,
                        generation,
                        reason: e.to_string(),
                    });
                    return;
                }
            }
        });
    }

    /// Drops a lost client and waits for it to rejoin. Each round gets one retry.
    fn recover(&mut self, client_id: u32, round: u32, retried: &mut bool) -> Result<(), TransportError> {
        if let Some(p) = self.peers.remove(&client_id) {
            let _ = p.stream.shutdown(std::net::Shutdown::Both);
        }
        if *retried {
            return Err(TransportError::RetryExhausted { round, client_id });
        }
        *retried = true;
        let deadline = Instant::now() + self.cfg.io_timeout();
        self.accept_join(deadline, Some(client_id))?;
        log::info!("round {round}: client {client_id} rejoined; re-broadcasting");
        Ok(())
    }
}
