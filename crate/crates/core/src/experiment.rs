//! Multi-seed experiment orchestration and derived metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{DatasetSpec, ExperimentConfig, Perturbation};
use crate::error::{Error, Result};
use crate::graph::{generate_sbm, load_graph, Graph};
use crate::partition::{extract_subgraphs, sparsify_edges, sparsify_labels, ClientData};
use crate::rng::derive_seed;
use crate::sim::{MetricsLog, Simulation, TraceRecorder};

const STREAM_PARTITION: u64 = 0x5041_5254;
const STREAM_MASKS: u64 = 0x4d41_534b;
const STREAM_PERTURB: u64 = 0x5045_5254;

pub fn load_dataset(spec: &DatasetSpec) -> Result<Graph> {
    match spec {
        DatasetSpec::File { path } => load_graph(path),
        DatasetSpec::Sbm(sbm) => generate_sbm(sbm),
    }
}

/// Partitions `g`, splits masks, and applies the configured perturbation.
pub fn build_clients(cfg: &ExperimentConfig, g: &Graph, seed: u64) -> Result<Vec<ClientData>> {
    let assignment = cfg
        .partitioner
        .run(g, cfg.n_clients, derive_seed(seed, STREAM_PARTITION))?;
    let clients = extract_subgraphs(g, &assignment, cfg.split, derive_seed(seed, STREAM_MASKS))?;
    clients
        .into_iter()
        .map(|cd| {
            let s = derive_seed(derive_seed(seed, STREAM_PERTURB), cd.client_id() as u64);
            match cfg.perturbation {
                Perturbation::None => Ok(cd),
                Perturbation::LabelSparsity { rate } => sparsify_labels(&cd, rate, s),
                Perturbation::EdgeSparsity { rate } => sparsify_edges(&cd, rate, s),
            }
        })
        .collect()
}

/// Simulates one seed end to end. Returns the log and the delivery trace.
pub fn run_seed(cfg: &ExperimentConfig, g: &Graph, seed: u64) -> Result<(MetricsLog, Vec<String>)> {
    let clients = build_clients(cfg, g, seed)?;
    let mut trace = TraceRecorder::default();
    let log = Simulation::new(cfg, clients, seed)?.run_observed(&mut trace)?;
    Ok((log, trace.lines))
}

/// Smallest trip counter whose mean accuracy reaches `target`; `Some(0)` when
/// the initial model already does, `None` when never reached.
pub fn trips_to_target(log: &MetricsLog, target: f64) -> Option<u64> {
    if log.metadata.initial_mean_acc >= target {
        return Some(0);
    }
    log.records
        .iter()
        .find(|r| r.mean_acc >= target)
        .map(|r| r.trip)
}

/// Mean with a 95% Student-t confidence half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub half_width: f64,
    pub seeds: usize,
}

/// Mean and `t_{0.975, n−1}·s/√n` (zero for a single value).
pub fn aggregate_seeds(metric: &str, values: &[f64]) -> Result<SummaryRow> {
    if values.is_empty() {
        return Err(Error::Contract("summary of zero values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var == 0.0 {
            0.0
        } else {
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("positive degrees of freedom")
                .inverse_cdf(0.975);
            t * var.sqrt() / (n as f64).sqrt()
        }
    };
    Ok(SummaryRow {
        metric: metric.to_string(),
        mean,
        half_width,
        seeds: n,
    })
}

/// Summary rows for a set of per-seed logs: final mean accuracy, and
/// trips-to-target over the seeds that reached it.
pub fn summarize_logs(logs: &[MetricsLog], target: Option<f64>) -> Result<Vec<SummaryRow>> {
    let finals: Vec<f64> = logs.iter().map(MetricsLog::final_mean_acc).collect();
    let mut rows = vec![aggregate_seeds("final_mean_acc", &finals)?];
    if let Some(target) = target {
        let reached: Vec<f64> = logs
            .iter()
            .filter_map(|l| trips_to_target(l, target))
            .map(|t| t as f64)
            .collect();
        if reached.len() < logs.len() {
            log::info!(
                "{} of {} seeds never reached {target}",
                logs.len() - reached.len(),
                logs.len()
            );
        }
        if !reached.is_empty() {
            rows.push(aggregate_seeds("trips_to_target", &reached)?);
        }
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("metric,mean,half_width,seeds\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.metric, r.mean, r.half_width, r.seeds).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub logs: Vec<MetricsLog>,
    pub summary: Vec<SummaryRow>,
}

fn log_stem(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}_seed{seed}", cfg.strategy)
}

/// Runs every seed and writes `<strategy>_seed<s>.csv`, its `.json`
/// metadata sidecar, optional `.trace` files, and `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let g = load_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut logs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (log, trace) = run_seed(cfg, &g, seed)?;
        let stem = cfg.output_dir.join(log_stem(cfg, seed));
        std::fs::write(stem.with_extension("csv"), log.to_csv())?;
        std::fs::write(stem.with_extension("json"), log.metadata_json())?;
        if cfg.write_trace {
            let mut text = trace.join("\n");
            text.push('\n');
            std::fs::write(stem.with_extension("trace"), text)?;
        }
        log::info!("seed {seed}: final mean accuracy {:.4}", log.final_mean_acc());
        logs.push(log);
    }
    let summary = summarize_logs(&logs, cfg.target_accuracy)?;
    std::fs::write(cfg.output_dir.join("summary.csv"), summary_csv(&summary))?;
    Ok(ExperimentResult { logs, summary })
}

/// One run read back from disk: its mean-accuracy column and sidecar.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub name: String,
    pub initial_mean_acc: f64,
    pub mean_acc: Vec<(u64, f64)>,
}

impl StoredRun {
    pub fn final_mean_acc(&self) -> f64 {
        self.mean_acc.last().map_or(self.initial_mean_acc, |&(_, a)| a)
    }

    pub fn trips_to_target(&self, target: f64) -> Option<u64> {
        if self.initial_mean_acc >= target {
            return Some(0);
        }
        self.mean_acc.iter().find(|&&(_, a)| a >= target).map(|&(t, _)| t)
    }
}

/// Reads every `*.csv` log (with its `.json` sidecar) in `dir`.
pub fn read_runs(dir: &Path) -> Result<Vec<StoredRun>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && p.with_extension("json").exists())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.with_extension("json"))?)
                .map_err(|e| Error::parse(0, e.to_string()))?;
            let initial_mean_acc = meta["initial_mean_acc"].as_f64().unwrap_or(0.0);
            let text = std::fs::read_to_string(&p)?;
            let mean_acc = text
                .lines()
                .enumerate()
                .skip(1)
                .map(|(i, line)| {
                    let cols: Vec<&str> = line.split(',').collect();
                    let bad = || Error::parse(i + 1, "malformed metrics row");
                    let trip = cols.first().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
                    let acc = cols.get(4).and_then(|c| c.parse().ok()).ok_or_else(bad)?;
                    Ok((trip, acc))
                })
                .collect::<Result<_>>()?;
            Ok(StoredRun {
                name: p.file_stem().unwrap().to_string_lossy().into_owned(),
                initial_mean_acc,
                mean_acc,
            })
        })
        .collect()
}
