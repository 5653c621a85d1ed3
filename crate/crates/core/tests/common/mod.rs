//! Naive reference implementations and random instance generators shared by
//! the integration suites. Everything here works on dense adjacency matrices
//! so it shares no code path with the library kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use fedsagcl_core::fgl::{KnowledgeBaseEntry, LscValue, Sfm};
use fedsagcl_core::gcn::{ModelParams, ParamShape, SoftLabelMatrix};
use fedsagcl_core::graph::{Graph, NodeMasks};
use fedsagcl_core::matrix::Matrix;
use fedsagcl_core::partition::ClientData;
use fedsagcl_core::rng::{seeded, SimRng};
use rand::Rng;

pub struct Instance {
    pub cd: ClientData,
    pub adj: Vec<Vec<bool>>,
    pub soft: SoftLabelMatrix,
    pub rows: Vec<Vec<f64>>,
}

pub fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in edges {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    adj
}

pub fn dense_degrees(adj: &[Vec<bool>]) -> Vec<f64> {
    adj.iter().map(|r| r.iter().filter(|&&b| b).count() as f64).collect()
}

/// A probability row; some entries are exactly zero now and then.
pub fn random_row(rng: &mut SimRng, c: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..c)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    if row.iter().all(|&v| v == 0.0) {
        row[0] = 1.0;
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    row
}

/// Random graph of 1..=max_nodes nodes with random soft labels.
pub fn random_instance(seed: u64, max_nodes: usize) -> Instance {
    let mut rng = seeded(seed);
    let n = rng.random_range(1..=max_nodes);
    let c = rng.random_range(2..=4);
    let p: f64 = rng.random_range(0.1..0.9);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let f = 3;
    let feats: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let g = Graph::new(edges.clone(), Matrix::from_vec(n, f, feats), labels, c).unwrap();
    let masks = NodeMasks {
        train: (0..n).collect(),
        val: vec![],
        test: vec![],
    };
    let cd = ClientData::whole(g, masks).unwrap();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_row(&mut rng, c)).collect();
    let soft = SoftLabelMatrix::new(Matrix::from_rows(&rows)).unwrap();
    Instance {
        cd,
        adj: dense_adjacency(n, &edges),
        soft,
        rows,
    }
}

pub fn naive_sfm(adj: &[Vec<bool>], y: &[Vec<f64>], c: usize) -> Vec<f64> {
    let d = dense_degrees(adj);
    let mut out = vec![0.0; c * c];
    for i in 0..adj.len() {
        for j in 0..adj.len() {
            if !adj[i][j] {
                continue;
            }
            for a in 0..c {
                for b in 0..c {
                    out[a * c + b] += d[i] * d[j] * y[i][a] * y[j][b];
                }
            }
        }
    }
    out
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn naive_label_propagation(adj: &[Vec<bool>], y0: &[Vec<f64>], lambda: f64, k: usize) -> Vec<Vec<f64>> {
    let n = adj.len();
    let d = dense_degrees(adj);
    let c = y0.first().map_or(0, Vec::len);
    let mut y = y0.to_vec();
    for _ in 0..k {
        let mut next = vec![vec![0.0; c]; n];
        for i in 0..n {
            for a in 0..c {
                let mut s = 0.0;
                for j in 0..n {
                    if adj[i][j] {
                        s += y[j][a] / (d[i] * d[j]).sqrt();
                    }
                }
                next[i][a] = lambda * y0[i][a] + (1.0 - lambda) * s;
            }
            let total: f64 = next[i].iter().sum();
            for a in 0..c {
                next[i][a] = if total > 0.0 { next[i][a] / total } else { 1.0 / c as f64 };
            }
        }
        y = next;
    }
    y
}

pub fn naive_lsc(adj: &[Vec<bool>], y: &[Vec<f64>]) -> f64 {
    let d = dense_degrees(adj);
    let mut total = 0.0;
    for i in 0..adj.len() {
        let mut h = 0.0;
        for &p in &y[i] {
            if p > 0.0 {
                h += p * p.ln();
            }
        }
        total += d[i] * (1.0 / std::f64::consts::E + h);
    }
    total
}

pub fn naive_staleness(lsc: &[f64], tau: &[u64], t: u64, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = lsc
        .iter()
        .zip(tau)
        .map(|(&l, &s)| l / ((t - s) as f64).powf(alpha))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z).collect()
}

pub fn naive_aggregate(models: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; models[0].len()];
    for (m, &wi) in models.iter().zip(w) {
        for k in 0..out.len() {
            out[k] += wi * m[k];
        }
    }
    out
}

pub fn naive_blend(server: &[f64], local: &[f64], l_server: f64, l_local: f64) -> Vec<f64> {
    server
        .iter()
        .zip(local)
        .map(|(s, l)| (l_server * s + l_local * l) / (l_server + l_local))
        .collect()
}

/// Normwise relative error `max|a−b| / max(|a|, |b|)`; zero when equal.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().chain(a).map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_params(rng: &mut SimRng, shape: ParamShape) -> ModelParams {
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    ModelParams::from_flat(shape, data).unwrap()
}

pub fn entry(client_id: usize, params: ModelParams, sfm: Vec<f64>, c: usize, lsc: f64, tau: u64) -> KnowledgeBaseEntry {
    KnowledgeBaseEntry {
        client_id,
        params,
        sfm: Sfm::from_flat(c, sfm).unwrap(),
        lsc: LscValue::new(lsc),
        tau,
    }
}
