//! Numerical kernels of the semi-asynchronous protocol: soft-label feature
//! matrices, similarity clustering, non-parametric label propagation, local
//! smoothness confidence, staleness-aware weighting, and model mixing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{ModelParams, SoftLabelMatrix};
use crate::matrix::Matrix;
use crate::partition::ClientData;

/// Floor applied to local smoothness confidence.
pub const LSC_EPSILON: f64 = 1e-6;

/// Degree-weighted sum of soft-label outer products over adjacent nodes,
/// `C × C`, summed over both orientations of every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Sfm {
    num_classes: usize,
    values: Vec<f64>,
}

impl Sfm {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            num_classes,
            values: vec![0.0; num_classes * num_classes],
        }
    }

    pub fn from_flat(num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_classes * num_classes {
            return Err(Error::Contract("SFM length must be num_classes²".into()));
        }
        Ok(Self { num_classes, values })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Row-major flattened view.
    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.num_classes + b]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Local smoothness confidence: the raw value and its floored version.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LscValue {
    pub raw: f64,
    pub clamped: f64,
}

impl LscValue {
    pub fn new(raw: f64) -> Self {
        Self {
            raw,
            clamped: raw.max(LSC_EPSILON),
        }
    }
}

/// Protocol hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FglHyper {
    /// Cosine similarity threshold for cluster membership.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Weight on the initial soft labels during propagation.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    /// Staleness attenuation exponent.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_theta() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    0.5
}
fn default_k_steps() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.5
}

impl Default for FglHyper {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            lambda: default_lambda(),
            k_steps: default_k_steps(),
            alpha: default_alpha(),
        }
    }
}

impl FglHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", format!("{} outside [0, 1]", self.theta)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("{} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// Latest upload the server holds for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBaseEntry {
    pub client_id: usize,
    pub params: ModelParams,
    pub sfm: Sfm,
    pub lsc: LscValue,
    /// Round stamp of the model the client trained from.
    pub tau: u64,
}

pub type KnowledgeBase = BTreeMap<usize, KnowledgeBaseEntry>;

pub fn compute_sfm(soft: &SoftLabelMatrix, cd: &ClientData) -> Result<Sfm> {
    if soft.rows() != cd.node_count() {
        return Err(Error::Contract("soft labels need one row per local node".into()));
    }
    let c = soft.num_classes();
    let deg = cd.degrees();
    let mut sfm = Sfm::zeros(c);
    for &(u, v) in cd.graph().edges() {
        let w = (deg[u] * deg[v]) as f64;
        let (yu, yv) = (soft.row(u), soft.row(v));
        for a in 0..c {
            let row = &mut sfm.values[a * c..(a + 1) * c];
            let (wu, wv) = (w * yu[a], w * yv[a]);
            for b in 0..c {
                row[b] += wu * yv[b] + wv * yu[b];
            }
        }
    }
    Ok(sfm)
}

/// Cosine similarity of flattened SFMs; `0` when either has zero norm.
pub fn cosine_similarity(a: &Sfm, b: &Sfm) -> Result<f64> {
    if a.num_classes != b.num_classes {
        return Err(Error::Contract("SFMs of different class counts".into()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `{j ∈ kb, j ≠ i : sim(i, j) ≥ θ} ∪ {i}`.
pub fn cluster_set(i: usize, kb: &KnowledgeBase, theta: f64) -> Result<BTreeSet<usize>> {
    let own = kb
        .get(&i)
        .ok_or_else(|| Error::Contract(format!("client {i} missing from knowledge base")))?;
    let mut out = BTreeSet::from([i]);
    for (&j, entry) in kb {
        if j != i && cosine_similarity(&own.sfm, &entry.sfm)? >= theta {
            out.insert(j);
        }
    }
    Ok(out)
}

/// `k` steps of `Y ← λ·Y⁰ + (1−λ)·Σ_{j∈N(i)} Y_j / √(D_i·D_j)`, with each
/// row renormalized after every step (all-zero rows become uniform).
pub fn label_propagation(soft: &SoftLabelMatrix, cd: &ClientData, lambda: f64, k_steps: usize) -> Result<SoftLabelMatrix> {
    if soft.rows() != cd.node_count() {
        return Err(Error::Contract("soft labels need one row per local node".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0, 1]")));
    }
    let initial = soft.values();
    let n = initial.rows();
    let c = initial.cols();
    let deg = cd.degrees();
    let neigh = cd.graph().neighbors();
    let mut current = initial.clone();
    for _ in 0..k_steps {
        let mut next = Matrix::zeros(n, c);
        for i in 0..n {
            let mut acc = vec![0.0; c];
            for &j in &neigh[i] {
                let w = 1.0 / ((deg[i] * deg[j]) as f64).sqrt();
                for (a, &y) in acc.iter_mut().zip(current.row(j)) {
                    *a += w * y;
                }
            }
            let row = next.row_mut(i);
            for ((out, &y0), &a) in row.iter_mut().zip(initial.row(i)).zip(&acc) {
                *out = lambda * y0 + (1.0 - lambda) * a;
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            }
        }
        current = next;
    }
    Ok(SoftLabelMatrix::new_unchecked(current))
}

/// `Σ_i D_i · (e⁻¹ + Σ_c y_ic ln y_ic)`, with `0·ln 0 = 0`.
pub fn compute_lsc(propagated: &SoftLabelMatrix, cd: &ClientData) -> Result<LscValue> {
    if propagated.rows() != cd.node_count() {
        return Err(Error::Contract("soft labels need one row per local node".into()));
    }
    let inv_e = (-1.0f64).exp();
    let raw = cd
        .degrees()
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d > 0)
        .map(|(i, &d)| {
            let neg_entropy: f64 = propagated
                .row(i)
                .iter()
                .filter(|&&y| y > 0.0)
                .map(|&y| y * y.ln())
                .sum();
            d as f64 * (inv_e + neg_entropy)
        })
        .sum();
    Ok(LscValue::new(raw))
}

/// Normalized `LSC_j · (t − τ_j)^{−α}` over the given entries.
pub fn staleness_weights(entries: &[&KnowledgeBaseEntry], t: u64, alpha: f64) -> Result<Vec<f64>> {
    if entries.is_empty() {
        return Err(Error::Contract("staleness weights of an empty set".into()));
    }
    let raw: Vec<f64> = entries
        .iter()
        .map(|e| {
            if e.tau >= t {
                return Err(Error::Contract(format!(
                    "entry for client {} has tau {} >= round {t}",
                    e.client_id, e.tau
                )));
            }
            Ok(e.lsc.clamped * ((t - e.tau) as f64).powf(-alpha))
        })
        .collect::<Result<_>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|u| u / total).collect())
}

/// Entrywise `Σ w_i · params_i`.
pub fn aggregate_models(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::Contract("aggregating zero models".into()))?;
    if params.len() != weights.len() {
        return Err(Error::Contract("one weight per model required".into()));
    }
    if params.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Contract("model shapes differ".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("weights sum to {total}, not 1")));
    }
    let mut out = ModelParams::zeros(first.shape());
    for (p, &w) in params.iter().zip(weights) {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Confidence-weighted mix of a downloaded model with the local one.
pub fn blend_local(server: &ModelParams, local: &ModelParams, cluster_lsc: f64, local_lsc: f64) -> Result<ModelParams> {
    if cluster_lsc < 0.0 || local_lsc < 0.0 || cluster_lsc + local_lsc <= 0.0 {
        return Err(Error::Contract(format!(
            "confidences must be nonnegative and not both zero ({cluster_lsc}, {local_lsc})"
        )));
    }
    if server.shape() != local.shape() {
        return Err(Error::Contract("blend of models with different shapes".into()));
    }
    // local + w·(server − local) keeps ω̃ = ω_i a bitwise fixed point.
    let w = cluster_lsc / (cluster_lsc + local_lsc);
    let mut out = local.clone();
    for (o, &s) in out.as_mut_slice().iter_mut().zip(server.as_slice()) {
        *o += w * (s - *o);
    }
    Ok(out)
}
