//! Attributed, labeled, undirected graphs and the pieces built directly on
//! them: GCN-normalized sparse adjacency, stochastic block model generation,
//! the line-oriented graph file format, and stratified train/val/test masks.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

/// An undirected simple graph with node features and class labels.
///
/// Edges are stored once per unordered pair as `(u, v)` with `u < v`, sorted
/// lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

/// Counts of input edges discarded while canonicalizing an edge list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeCleanup {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl Graph {
    /// Builds a graph, canonicalizing the edge list (orientation, order,
    /// duplicates and self-loops).
    pub fn new(
        edges: Vec<(usize, usize)>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        Self::with_cleanup(edges, features, labels, num_classes).map(|(g, _)| g)
    }

    pub fn with_cleanup(
        edges: Vec<(usize, usize)>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<(Self, EdgeCleanup)> {
        let node_count = labels.len();
        if node_count == 0 {
            return Err(Error::Validation("graph needs at least one node".into()));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if features.rows() != node_count {
            return Err(Error::Validation(format!(
                "feature rows {} != node count {node_count}",
                features.rows()
            )));
        }
        if let Some(bad) = features.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature {bad}")));
        }
        if let Some((node, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {label} of node {node} outside [0, {num_classes})"
            )));
        }
        let mut cleanup = EdgeCleanup::default();
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) references a node >= {node_count}"
                )));
            }
            if u == v {
                cleanup.self_loops += 1;
                continue;
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        cleanup.duplicates = before - canon.len();
        Ok((
            Self {
                node_count,
                edges: canon,
                features,
                labels,
                num_classes,
            },
            cleanup,
        ))
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Raw undirected degree of every node, without self-loops.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Same nodes, features and labels with a different edge set.
    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }

    /// Induced subgraph on `nodes` (relabeled in the given order).
    pub fn induced(&self, nodes: &[usize]) -> Result<Self> {
        let mut local = vec![usize::MAX; self.node_count];
        for (i, &g) in nodes.iter().enumerate() {
            local[g] = i;
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| {
                let (lu, lv) = (local[u], local[v]);
                (lu != usize::MAX && lv != usize::MAX).then_some((lu, lv))
            })
            .collect();
        let f = self.feature_dim();
        let mut features = Matrix::zeros(nodes.len(), f);
        for (i, &g) in nodes.iter().enumerate() {
            features.row_mut(i).copy_from_slice(self.features.row(g));
        }
        let labels = nodes.iter().map(|&g| self.labels[g]).collect();
        Self::new(edges, features, labels, self.num_classes)
    }
}

/// Compressed sparse rows. Used for the GCN-normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAdjacency {
    pub fn dim(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Stored value at `(r, c)`, `0.0` when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Sparse-dense product `self · dense`.
    pub fn spmm(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.dim(), dense.rows(), "spmm shape mismatch");
        let mut out = Matrix::zeros(dense.rows(), dense.cols());
        for r in 0..self.dim() {
            let o = out.row_mut(r);
            for (c, w) in self.row(r) {
                for (ov, &x) in o.iter_mut().zip(dense.row(c)) {
                    *ov += w * x;
                }
            }
        }
        out
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃ = D + I`.
pub fn normalized_adjacency(g: &Graph) -> SparseAdjacency {
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    let mut neigh = g.neighbors();
    for (i, list) in neigh.iter_mut().enumerate() {
        let pos = list.binary_search(&i).unwrap_err();
        list.insert(pos, i);
    }
    let mut row_offsets = Vec::with_capacity(g.node_count() + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for (i, list) in neigh.iter().enumerate() {
        for &j in list {
            col_indices.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        row_offsets.push(col_indices.len());
    }
    SparseAdjacency {
        row_offsets,
        col_indices,
        values,
    }
}

/// Stochastic block model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub block_sizes: Vec<usize>,
    pub intra_prob: f64,
    pub inter_prob: f64,
    pub feature_dim: usize,
    #[serde(default)]
    pub feature_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.is_empty() {
            return Err(Error::config("block_sizes", "at least one block is required"));
        }
        if self.block_sizes.contains(&0) {
            return Err(Error::config("block_sizes", "every block needs at least one node"));
        }
        for (key, p) in [("intra_prob", self.intra_prob), ("inter_prob", self.inter_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("{p} is not a probability")));
            }
        }
        if self.feature_dim < 1 {
            return Err(Error::config("feature_dim", "must be at least 1"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::config("feature_noise", "must be a finite nonnegative value"));
        }
        Ok(())
    }
}

/// Samples a stochastic block model graph.
///
/// Draw order, all from one ChaCha8 stream seeded with `cfg.seed`:
/// 1. for `u` in `0..n`, for `v` in `u+1..n`: one uniform `f64` in `[0, 1)`;
///    the edge exists when the draw is `< p` (intra or inter probability);
/// 2. for every node in order, for every feature column in order: one normal
///    draw with standard deviation `feature_noise`, added to the block
///    indicator (`1` where `column % blocks == block`).
///
/// Labels are block ids. A single-block model still declares two classes.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let block_of: Vec<usize> = cfg
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let n = block_of.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block_of[u] == block_of[v] {
                cfg.intra_prob
            } else {
                cfg.inter_prob
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let blocks = cfg.block_sizes.len();
    let noise = Normal::new(0.0, cfg.feature_noise)
        .map_err(|e| Error::config("feature_noise", e.to_string()))?;
    let mut features = Matrix::zeros(n, cfg.feature_dim);
    for (u, &b) in block_of.iter().enumerate() {
        for (d, x) in features.row_mut(u).iter_mut().enumerate() {
            let indicator = if d % blocks == b { 1.0 } else { 0.0 };
            *x = indicator + noise.sample(&mut rng);
        }
    }
    Graph::new(edges, features, block_of, blocks.max(2))
}

/// Reads the text graph format, logging discarded edges.
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let file = std::fs::File::open(path)?;
    let (g, cleanup) = read_graph(file)?;
    if cleanup.self_loops > 0 || cleanup.duplicates > 0 {
        log::warn!(
            "dropped {} self-loop(s) and {} duplicate edge(s) while loading",
            cleanup.self_loops,
            cleanup.duplicates
        );
    }
    Ok(g)
}

/// Parses the format:
///
/// ```text
/// nodes=<n> features=<f> classes=<C>
/// node <id> <label> <f floats>
/// edge <u> <v>
/// ```
///
/// Blank lines and lines starting with `#` are ignored.
pub fn read_graph(reader: impl Read) -> Result<(Graph, EdgeCleanup)> {
    let reader = BufReader::new(reader);
    let mut header: Option<(usize, usize, usize)> = None;
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut features = Matrix::zeros(0, 0);
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_ascii_whitespace();
        let Some((n, f, c)) = header else {
            let parsed = parse_header(line).ok_or_else(|| {
                Error::parse(lineno, "expected header `nodes=<n> features=<f> classes=<C>`")
            })?;
            labels = vec![None; parsed.0];
            features = Matrix::zeros(parsed.0, parsed.1);
            header = Some(parsed);
            continue;
        };
        match tokens.next() {
            Some("node") => {
                let id: usize = parse_token(tokens.next(), lineno, "node id")?;
                let label: usize = parse_token(tokens.next(), lineno, "label")?;
                if id >= n {
                    return Err(Error::parse(lineno, format!("node id {id} >= {n}")));
                }
                if labels[id].is_some() {
                    return Err(Error::parse(lineno, format!("node {id} declared twice")));
                }
                if label >= c {
                    return Err(Error::Validation(format!(
                        "line {lineno}: label {label} outside [0, {c})"
                    )));
                }
                let row = features.row_mut(id);
                for slot in row.iter_mut() {
                    *slot = parse_token(tokens.next(), lineno, "feature value")?;
                }
                if tokens.next().is_some() {
                    return Err(Error::parse(lineno, format!("more than {f} feature values")));
                }
                labels[id] = Some(label);
            }
            Some("edge") => {
                let u: usize = parse_token(tokens.next(), lineno, "edge endpoint")?;
                let v: usize = parse_token(tokens.next(), lineno, "edge endpoint")?;
                if u >= n || v >= n {
                    return Err(Error::parse(lineno, format!("edge ({u}, {v}) out of range")));
                }
                if tokens.next().is_some() {
                    return Err(Error::parse(lineno, "trailing tokens after edge"));
                }
                edges.push((u, v));
            }
            Some(other) => {
                return Err(Error::parse(lineno, format!("unknown record `{other}`")));
            }
            None => unreachable!("blank lines are skipped"),
        }
    }
    let Some((_, _, classes)) = header else {
        return Err(Error::parse(0, "missing header"));
    };
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Validation(format!("node {i} never declared"))))
        .collect::<Result<Vec<_>>>()?;
    Graph::with_cleanup(edges, features, labels, classes)
}

fn parse_header(line: &str) -> Option<(usize, usize, usize)> {
    let mut n = None;
    let mut f = None;
    let mut c = None;
    for tok in line.split_ascii_whitespace() {
        let (key, value) = tok.split_once('=')?;
        let value: usize = value.parse().ok()?;
        match key {
            "nodes" => n = Some(value),
            "features" => f = Some(value),
            "classes" => c = Some(value),
            _ => return None,
        }
    }
    Some((n?, f?, c?))
}

fn parse_token<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{tok}`")))
}

/// Writes the canonical text form (nodes ascending, edges lexicographic).
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_graph(g: &Graph, mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "nodes={} features={} classes={}",
        g.node_count(),
        g.feature_dim(),
        g.num_classes()
    )?;
    let mut line = String::new();
    for i in 0..g.node_count() {
        line.clear();
        write!(line, "node {i} {}", g.labels()[i]).unwrap();
        for x in g.features().row(i) {
            write!(line, " {x:?}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    for &(u, v) in g.edges() {
        writeln!(out, "edge {u} {v}")?;
    }
    Ok(())
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_graph(g, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Which node mask to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Train,
    Val,
    Test,
}

/// Disjoint train/val/test node sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeMasks {
    pub fn get(&self, kind: MaskKind) -> &[usize] {
        match kind {
            MaskKind::Train => &self.train,
            MaskKind::Val => &self.val,
            MaskKind::Test => &self.test,
        }
    }
}

/// Train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.2,
            val: 0.4,
            test: 0.4,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("split", "ratios must be finite and nonnegative"));
        }
        if parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config("split", "ratios sum to more than 1"));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Category sizes for `n` items: floors of `ratio·n`, then the remaining
/// `⌊Σratio·n⌋ − Σfloors` items go to the largest fractional parts
/// (ties to the earlier category).
fn category_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    const EPS: f64 = 1e-9;
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|x| (x + EPS).floor() as usize);
    let total = ((ratios.iter().sum::<f64>() * n as f64 + EPS).floor() as usize).min(n);
    let mut extra = total.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if extra == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            extra -= 1;
        }
    }
    counts
}

fn assign(nodes: &[usize], counts: [usize; 3], masks: &mut NodeMasks) {
    let (train, rest) = nodes.split_at(counts[0]);
    let (val, rest) = rest.split_at(counts[1]);
    let test = &rest[..counts[2]];
    masks.train.extend_from_slice(train);
    masks.val.extend_from_slice(val);
    masks.test.extend_from_slice(test);
}

/// Per-class stratified random split. Falls back to an unstratified split
/// when some class has fewer nodes than there are nonempty categories.
pub fn split_masks(g: &Graph, ratios: SplitRatios, seed: u64) -> Result<NodeMasks> {
    ratios.validate()?;
    let r = ratios.as_array();
    let categories = r.iter().filter(|&&x| x > 0.0).count();
    let mut rng = seeded(seed);
    let mut by_class = vec![Vec::new(); g.num_classes()];
    for (node, &label) in g.labels().iter().enumerate() {
        by_class[label].push(node);
    }
    let stratify = by_class
        .iter()
        .all(|members| members.is_empty() || members.len() >= categories);
    let mut masks = NodeMasks::default();
    if stratify {
        for members in &mut by_class {
            members.shuffle(&mut rng);
            assign(members, category_counts(members.len(), r), &mut masks);
        }
    } else {
        log::debug!("a class has fewer than {categories} nodes; using an unstratified split");
        let mut all: Vec<usize> = (0..g.node_count()).collect();
        all.shuffle(&mut rng);
        assign(&all, category_counts(all.len(), r), &mut masks);
    }
    masks.train.sort_unstable();
    masks.val.sort_unstable();
    masks.test.sort_unstable();
    Ok(masks)
}
