//! In-process federation: the same server and site calls as the TCP drivers,
//! with no sockets in between.

use std::path::PathBuf;

use thiserror::Error;
use ucfed_autograd::Element;
use ucfed_core::fed::select::ValidationLogEntry;
use ucfed_core::fed::server::ServerError;
use ucfed_core::fed::site::SiteError;
use ucfed_core::fed::train::BatchOutput;
use ucfed_core::fed::{ServerState, Sharable, SiteTrainer};

use crate::config::FedConfig;
use crate::session::{close_round, digest, initial_server_state, load_site, RoundRecord, SetupError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("client {client_id}: {source}")]
    Site {
        client_id: u32,
        #[source]
        source: SiteError,
    },
    #[error(transparent)]
    Server(#[from] ServerError),
}

/// Everything a breakpoint hook can look at for one client in one round.
pub struct RoundEvent<'a, T> {
    pub round: u32,
    pub client_id: u32,
    pub task: &'a Sharable,
    pub result: &'a Sharable,
    pub batch: Option<&'a BatchOutput<T>>,
}

pub struct SimReport<T> {
    pub state: ServerState<T>,
    pub rounds: Vec<RoundRecord>,
    /// Digest of the global weights after each completed round.
    pub trajectory: Vec<String>,
    /// Private validation logs, indexed by client id.
    pub validation: Vec<Vec<ValidationLogEntry>>,
    /// Each site's selected (round, weights) by its own validation, indexed by client id.
    pub selected: Vec<Option<(u32, Sharable)>>,
    pub checkpoints: Vec<PathBuf>,
}

/// Loads every site named in the config and runs the federation.
pub fn run_simulation<T: Element>(
    cfg: &FedConfig,
    hook: impl FnMut(&RoundEvent<'_, T>),
) -> Result<SimReport<T>, SimError> {
    let sites = (0..cfg.n_clients)
        .map(|id| load_site::<T>(cfg, id))
        .collect::<Result<Vec<_>, _>>()?;
    simulate_sites(cfg, sites, hook)
}

/// Runs the federation over already-built site trainers, in client-id order.
pub fn simulate_sites<T: Element>(
    cfg: &FedConfig,
    mut sites: Vec<SiteTrainer<T>>,
    mut hook: impl FnMut(&RoundEvent<'_, T>),
) -> Result<SimReport<T>, SimError> {
    sites.sort_by_key(|s| s.client_id());
    let mut state = initial_server_state::<T>(cfg)?;
    let mut rounds = Vec::new();
    let mut trajectory = Vec::new();
    let mut checkpoints = Vec::new();
    while state.round < cfg.rounds {
        let task = state.task();
        let mut results = Vec::with_capacity(sites.len());
        for site in sites.iter_mut() {
            let client_id = site.client_id();
            let result = site
                .handle_task(&task)
                .map_err(|source| SimError::Site { client_id, source })?;
            hook(&RoundEvent {
                round: task.round,
                client_id,
                task: &task,
                result: &result,
                batch: site.last_batch(),
            });
            results.push((client_id, result));
        }
        rounds.push(close_round(&mut state, digest(&task), results)?);
        trajectory.push(digest(&state.task()));
        let last = state.round == cfg.rounds;
        if let Some(p) = state.maybe_persist(&cfg.checkpoint_dir, cfg.checkpoint_every, last)? {
            checkpoints.push(p);
        }
    }
    let last = state.task();
    for site in sites.iter_mut() {
        let client_id = site.client_id();
        site.observe(&last).map_err(|source| SimError::Site { client_id, source })?;
    }
    Ok(SimReport {
        validation: sites.iter().map(|s| s.validator().log().to_vec()).collect(),
        selected: sites.iter().map(|s| s.validator().best().cloned()).collect(),
        state,
        rounds,
        trajectory,
        checkpoints,
    })
}
