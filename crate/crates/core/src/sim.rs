//! Deterministic discrete-event simulation of client trips.
//!
//! Time is an abstract integer clock. A trip starts by consuming the client's
//! mailbox and training; its upload reaches the server `duration` ticks later.
//! Messages that arrive while a trip is in flight wait in the mailbox until
//! the next trip starts.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gcn::{evaluate, init_params};
use crate::graph::MaskKind;
use crate::partition::ClientData;
use crate::protocol::{ClientState, ServerState, StepOutcome, Strategy, UploadMessage};
use crate::rng::{derive_seed, seeded};

const STREAM_LATENCY: u64 = 0x4c41_5445;
const STREAM_INIT: u64 = 0x494e_4954;

/// Static per-client trip durations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyProfile {
    pub durations: Vec<u64>,
    pub is_edge: Vec<bool>,
}

impl LatencyProfile {
    pub fn uniform(n: usize) -> Self {
        Self {
            durations: vec![1; n],
            is_edge: vec![false; n],
        }
    }
}

/// Flags `⌊edge_fraction·n⌋` random clients as edge devices. An edge trip
/// lasts `c·n` ticks with `c` uniform in `lo..=hi` (one global cycle is `n`
/// unit trips); every other trip lasts one tick.
pub fn assign_latencies(n: usize, edge_fraction: f64, lag_range: (u64, u64), seed: u64) -> Result<LatencyProfile> {
    if !(0.0..=1.0).contains(&edge_fraction) {
        return Err(Error::config("edge_fraction", "must lie in [0, 1]"));
    }
    let (lo, hi) = lag_range;
    if lo < 1 || lo > hi {
        return Err(Error::config("lag_range", "needs 1 <= lo <= hi"));
    }
    let edges = ((edge_fraction * n as f64) + 1e-9).floor() as usize;
    let mut rng = seeded(seed);
    let mut profile = LatencyProfile::uniform(n);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, edges.min(n)).into_vec();
    chosen.sort_unstable();
    for c in chosen {
        profile.is_edge[c] = true;
        profile.durations[c] = rng.random_range(lo..=hi) * n as u64;
    }
    Ok(profile)
}

/// A pending trip completion. Ordered by `(time, client_id, seq)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub time: u64,
    pub client_id: usize,
    pub seq: u64,
}

pub fn next_event_order(mut events: Vec<Event>) -> Vec<Event> {
    events.sort();
    events
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub trip: u64,
    pub time: u64,
    pub client_id: usize,
    pub client_acc: f64,
    pub mean_acc: f64,
    /// Cached test accuracy of every client after this trip.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub strategy: Strategy,
    pub initial_mean_acc: f64,
    pub trips: u64,
    pub edge_clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub metadata: RunMetadata,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn final_mean_acc(&self) -> f64 {
        self.records
            .last()
            .map_or(self.metadata.initial_mean_acc, |r| r.mean_acc)
    }

    /// `trip,time,client_id,client_acc,mean_acc`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trip,time,client_id,client_acc,mean_acc\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.trip, r.time, r.client_id, r.client_acc, r.mean_acc).unwrap();
        }
        out
    }

    pub fn metadata_json(&self) -> String {
        serde_json::to_string_pretty(&self.metadata).expect("metadata serializes")
    }
}

/// Hooks into the event loop, for traces and invariant checks.
pub trait SimObserver {
    fn on_step(&mut self, _time: u64, _outcome: &StepOutcome, _clients: &[ClientState]) {}
}

impl SimObserver for () {}

/// Collects delivery trace lines.
#[derive(Debug, Default)]
pub struct TraceRecorder {
    pub lines: Vec<String>,
}

impl SimObserver for TraceRecorder {
    fn on_step(&mut self, _time: u64, outcome: &StepOutcome, _clients: &[ClientState]) {
        self.lines.extend(outcome.deliveries.iter().map(|d| d.trace_line()));
    }
}

pub struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    clients: Vec<ClientData>,
    seed: u64,
    latency: Option<LatencyProfile>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &'a ExperimentConfig, clients: Vec<ClientData>, seed: u64) -> Result<Self> {
        if cfg.n_clients > clients.len() {
            return Err(Error::config(
                "n_clients",
                format!("{} clients requested, {} partitions available", cfg.n_clients, clients.len()),
            ));
        }
        let mut clients = clients;
        clients.truncate(cfg.n_clients);
        Ok(Self {
            cfg,
            clients,
            seed,
            latency: None,
        })
    }

    /// Overrides the randomly assigned latencies.
    pub fn with_latency(mut self, latency: LatencyProfile) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn run(self) -> Result<MetricsLog> {
        self.run_observed(&mut ())
    }

    pub fn run_observed(self, observer: &mut dyn SimObserver) -> Result<MetricsLog> {
        let cfg = self.cfg;
        let n = self.clients.len();
        let first = self
            .clients
            .first()
            .ok_or_else(|| Error::config("n_clients", "no clients to simulate"))?;
        let hyper = cfg.effective_hyper();
        let init = init_params(
            first.graph().feature_dim(),
            cfg.hidden_dim,
            first.num_classes(),
            derive_seed(self.seed, STREAM_INIT),
        );
        let latency = match self.latency {
            Some(l) if l.durations.len() == n => l,
            Some(_) => return Err(Error::config("latency", "one duration per client required")),
            None => assign_latencies(n, cfg.edge_fraction, cfg.lag_range, derive_seed(self.seed, STREAM_LATENCY))?,
        };
        if latency.durations.contains(&0) {
            return Err(Error::config("latency", "durations must be >= 1"));
        }
        let mut clients: Vec<ClientState> = self
            .clients
            .into_iter()
            .map(|d| ClientState::new(d, init.clone()))
            .collect();
        let active: Vec<bool> = clients.iter().map(|c| !c.data.masks().train.is_empty()).collect();
        for (c, _) in active.iter().enumerate().filter(|(_, a)| !**a) {
            log::warn!("client {c} has no training nodes and stays inactive");
        }
        let train_sizes: BTreeMap<usize, usize> = clients
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(c, _)| (c.client_id(), c.data.masks().train.len()))
            .collect();
        let mut server = ServerState::new(
            cfg.strategy,
            hyper,
            cfg.server_options(),
            cfg.buffer_k(),
            init.clone(),
            train_sizes,
        )?;

        let accuracy = |state: &ClientState| -> Result<Option<f64>> {
            if state.data.masks().test.is_empty() {
                return Ok(None);
            }
            evaluate(&state.params, &state.data, MaskKind::Test).map(Some)
        };
        let mut acc: Vec<Option<f64>> = clients.iter().map(accuracy).collect::<Result<_>>()?;
        let mean = |acc: &[Option<f64>]| {
            let vals: Vec<f64> = acc.iter().flatten().copied().collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let initial_mean_acc = mean(&acc);

        let mut heap = BinaryHeap::new();
        let mut pending: Vec<Option<UploadMessage>> = vec![None; n];
        let mut seq = 0u64;
        let mut start_trip = |c: usize,
                              now: u64,
                              clients: &mut [ClientState],
                              pending: &mut [Option<UploadMessage>],
                              heap: &mut BinaryHeap<Reverse<Event>>|
         -> Result<()> {
            pending[c] = Some(clients[c].client_trip(&hyper, cfg.lr)?);
            heap.push(Reverse(Event {
                time: now + latency.durations[c],
                client_id: c,
                seq,
            }));
            seq += 1;
            Ok(())
        };
        for c in (0..n).filter(|&c| active[c]) {
            start_trip(c, 0, &mut clients, &mut pending, &mut heap)?;
        }

        let synchronous = cfg.strategy.is_synchronous();
        let mut waiting = BTreeSet::new();
        let mut records = Vec::with_capacity(cfg.max_trips as usize);
        let mut trips = 0u64;
        while trips < cfg.max_trips {
            let Some(Reverse(ev)) = heap.pop() else {
                break;
            };
            let c = ev.client_id;
            trips += 1;
            acc[c] = accuracy(&clients[c])?;
            records.push(MetricsRecord {
                trip: trips,
                time: ev.time,
                client_id: c,
                client_acc: acc[c].unwrap_or(f64::NAN),
                mean_acc: mean(&acc),
                accuracies: acc.iter().map(|a| a.unwrap_or(f64::NAN)).collect(),
            });
            let upload = pending[c].take().expect("completed trip has an upload");
            let outcome = server.handle_upload(upload)?;
            for d in &outcome.deliveries {
                clients[d.dst].mailbox.deliver(d.message.clone());
            }
            observer.on_step(ev.time, &outcome, &clients);
            if synchronous {
                waiting.insert(c);
                let released: Vec<usize> = outcome
                    .deliveries
                    .iter()
                    .map(|d| d.dst)
                    .filter(|d| waiting.contains(d))
                    .collect();
                for r in released {
                    waiting.remove(&r);
                    start_trip(r, ev.time, &mut clients, &mut pending, &mut heap)?;
                }
            } else {
                start_trip(c, ev.time, &mut clients, &mut pending, &mut heap)?;
            }
        }
        Ok(MetricsLog {
            metadata: RunMetadata {
                seed: self.seed,
                config_hash: cfg.hash(),
                strategy: cfg.strategy,
                initial_mean_acc,
                trips,
                edge_clients: (0..n).filter(|&c| latency.is_edge[c]).collect(),
            },
            records,
        })
    }
}

/// Runs one seeded simulation over prepared client data.
pub fn run_simulation(cfg: &ExperimentConfig, clients: Vec<ClientData>, seed: u64) -> Result<MetricsLog> {
    Simulation::new(cfg, clients, seed)?.run()
}
