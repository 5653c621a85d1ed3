//! Three operations for the static demo page. Results are JSON strings so
//! the page needs no glue beyond `JSON.parse`.

use fedsagcl_core::config::{DatasetSpec, ExperimentConfig};
use fedsagcl_core::experiment::run_seed;
use fedsagcl_core::fgl::{staleness_weights, KnowledgeBaseEntry, LscValue, Sfm};
use fedsagcl_core::gcn::{ModelParams, ParamShape};
use fedsagcl_core::graph::{generate_sbm, SbmConfig};
use fedsagcl_core::partition::{modularity, Partitioner};
use fedsagcl_core::protocol::Strategy;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Curves are thinned to at most this many points.
const MAX_POINTS: usize = 200;

fn demo_sbm(blocks: usize, block_size: usize, seed: u64) -> SbmConfig {
    SbmConfig {
        block_sizes: vec![block_size; blocks],
        intra_prob: 0.2,
        inter_prob: 0.01,
        feature_dim: blocks.max(2),
        feature_noise: 0.5,
        seed,
    }
}

#[derive(Serialize)]
pub struct Curve {
    pub strategy: String,
    pub trips: Vec<u64>,
    pub mean_acc: Vec<f64>,
    pub initial_mean_acc: f64,
    pub final_mean_acc: f64,
    pub edge_clients: Vec<usize>,
    pub broadcasts: usize,
}

/// Simulates one strategy on a six-block SBM split into `clients` balanced parts.
pub fn simulate_curve(strategy: &str, clients: usize, trips: u64, theta: f64, seed: u64) -> Result<Curve, String> {
    let strategy: Strategy = strategy.parse().map_err(|e| format!("{e}"))?;
    let sbm = demo_sbm(6, 60, 7);
    let g = generate_sbm(&sbm).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::with_defaults(DatasetSpec::Sbm(sbm), clients);
    cfg.partitioner = Partitioner::Balanced;
    cfg.strategy = strategy;
    cfg.lr = 0.2;
    cfg.hidden_dim = 16;
    cfg.max_trips = trips;
    cfg.hyper.theta = theta;
    cfg.validate().map_err(|e| e.to_string())?;
    let (log, trace) = run_seed(&cfg, &g, seed).map_err(|e| e.to_string())?;
    let stride = log.records.len().div_ceil(MAX_POINTS).max(1);
    let mut kept: Vec<_> = log.records.iter().step_by(stride).collect();
    if let Some(last) = log.records.last() {
        if kept.last().map(|r| r.trip) != Some(last.trip) {
            kept.push(last);
        }
    }
    Ok(Curve {
        strategy: strategy.to_string(),
        trips: kept.iter().map(|r| r.trip).collect(),
        mean_acc: kept.iter().map(|r| r.mean_acc).collect(),
        initial_mean_acc: log.metadata.initial_mean_acc,
        final_mean_acc: log.final_mean_acc(),
        edge_clients: log.metadata.edge_clients.clone(),
        broadcasts: trace.iter().filter(|l| l.contains("kind=broadcast")).count(),
    })
}

#[derive(Serialize)]
pub struct PartitionPreview {
    pub method: String,
    /// `histograms[c][k]` = nodes of class `k` owned by client `c`.
    pub histograms: Vec<Vec<usize>>,
    pub cut_edges: usize,
    pub edges: usize,
    pub modularity: f64,
}

pub fn partition_preview(method: &str, blocks: usize, clients: usize, seed: u64) -> Result<PartitionPreview, String> {
    let partitioner: Partitioner = method.parse().map_err(|e| format!("{e}"))?;
    let g = generate_sbm(&demo_sbm(blocks, 50, seed)).map_err(|e| e.to_string())?;
    let a = partitioner.run(&g, clients, seed).map_err(|e| e.to_string())?;
    let mut histograms = vec![vec![0; g.num_classes()]; a.num_clients()];
    for (v, &c) in a.client_of().iter().enumerate() {
        histograms[c][g.labels()[v]] += 1;
    }
    Ok(PartitionPreview {
        method: method.to_string(),
        histograms,
        cut_edges: a.cut_edges(&g),
        edges: g.edge_count(),
        modularity: modularity(&g, a.client_of()),
    })
}

/// Aggregation weights for clients with the given confidences and round
/// stamps, at server round `t`.
pub fn staleness_preview(lsc: &[f64], tau: &[u64], t: u64, alpha: f64) -> Result<Vec<f64>, String> {
    if lsc.len() != tau.len() || lsc.is_empty() {
        return Err("need one round stamp per confidence value".into());
    }
    let shape = ParamShape { feature_dim: 1, hidden_dim: 1, num_classes: 1 };
    let entries: Vec<KnowledgeBaseEntry> = lsc
        .iter()
        .zip(tau)
        .enumerate()
        .map(|(i, (&l, &s))| KnowledgeBaseEntry {
            client_id: i,
            params: ModelParams::zeros(shape),
            sfm: Sfm::zeros(1),
            lsc: LscValue::new(l),
            tau: s,
        })
        .collect();
    let refs: Vec<&KnowledgeBaseEntry> = entries.iter().collect();
    staleness_weights(&refs, t, alpha).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(strategy: &str, clients: usize, trips: u32, theta: f64, seed: u32) -> Result<String, JsError> {
    to_json(simulate_curve(strategy, clients, trips as u64, theta, seed as u64))
}

#[wasm_bindgen]
pub fn partition(method: &str, blocks: usize, clients: usize, seed: u32) -> Result<String, JsError> {
    to_json(partition_preview(method, blocks, clients, seed as u64))
}

#[wasm_bindgen]
pub fn staleness(lsc: Vec<f64>, tau: Vec<u32>, t: u32, alpha: f64) -> Result<String, JsError> {
    let tau: Vec<u64> = tau.into_iter().map(u64::from).collect();
    to_json(staleness_preview(&lsc, &tau, t as u64, alpha))
}
