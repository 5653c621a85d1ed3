//! Splitting a global graph into client subgraphs, plus the label and
//! topology sparsity perturbations used for robustness runs.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, split_masks, Graph, NodeMasks, SparseAdjacency, SplitRatios};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, seeded};

/// Node → client mapping. Every client owns at least one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommunityAssignment {
    client_of: Vec<usize>,
    num_clients: usize,
}

impl CommunityAssignment {
    pub fn new(client_of: Vec<usize>, num_clients: usize) -> Result<Self> {
        let mut sizes = vec![0usize; num_clients];
        for (node, &c) in client_of.iter().enumerate() {
            if c >= num_clients {
                return Err(Error::Validation(format!(
                    "node {node} assigned to client {c} >= {num_clients}"
                )));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Validation(format!("client {empty} owns no nodes")));
        }
        Ok(Self {
            client_of,
            num_clients,
        })
    }

    pub fn client_of(&self) -> &[usize] {
        &self.client_of
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clients];
        for &c in &self.client_of {
            sizes[c] += 1;
        }
        sizes
    }

    /// Global node ids owned by each client, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clients];
        for (node, &c) in self.client_of.iter().enumerate() {
            out[c].push(node);
        }
        out
    }

    /// Number of global edges whose endpoints land on different clients.
    pub fn cut_edges(&self, g: &Graph) -> usize {
        g.edges()
            .iter()
            .filter(|&&(u, v)| self.client_of[u] != self.client_of[v])
            .count()
    }

    /// One `<global_id> <client_id>` line per node.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        for (node, c) in self.client_of.iter().enumerate() {
            writeln!(out, "{node} {c}")?;
        }
        Ok(())
    }

    pub fn read_dump(reader: impl std::io::Read) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in std::io::BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_ascii_whitespace();
            let mut next = |what: &str| -> Result<usize> {
                it.next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(idx + 1, format!("invalid {what}")))
            };
            pairs.push((next("node id")?, next("client id")?));
        }
        pairs.sort_unstable();
        let client_of: Vec<usize> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(node, c))| {
                if node == i {
                    Ok(c)
                } else {
                    Err(Error::Validation(format!("node {i} missing or duplicated")))
                }
            })
            .collect::<Result<_>>()?;
        let num_clients = client_of.iter().max().map_or(0, |m| m + 1);
        Self::new(client_of, num_clients)
    }
}

fn check_client_count(g: &Graph, n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    if n_clients > g.node_count() {
        return Err(Error::config(
            "n_clients",
            format!("{n_clients} clients for {} nodes", g.node_count()),
        ));
    }
    Ok(())
}

/// Weighted graph used by the Louvain levels. `adj[i]` holds `(j, A_ij)`
/// including the self entry; `A_ii` counts intra-community edge weight in
/// both orientations.
struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    fn from_graph(g: &Graph) -> Self {
        let mut adj = vec![Vec::new(); g.node_count()];
        for &(u, v) in g.edges() {
            adj[u].push((v, 1.0));
            adj[v].push((u, 1.0));
        }
        Self { adj }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn strengths(&self) -> Vec<f64> {
        self.adj
            .iter()
            .map(|row| row.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    fn coarsen(&self, community: &[usize], count: usize) -> Self {
        let mut acc: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        for (i, row) in self.adj.iter().enumerate() {
            for &(j, w) in row {
                *acc[community[i]].entry(community[j]).or_insert(0.0) += w;
            }
        }
        Self {
            adj: acc.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }
}

fn modularity_of(g: &WeightedGraph, community: &[usize]) -> f64 {
    let k = g.strengths();
    let m2: f64 = k.iter().sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let count = community.iter().max().map_or(0, |m| m + 1);
    let mut inside = vec![0.0; count];
    let mut total = vec![0.0; count];
    for (i, row) in g.adj.iter().enumerate() {
        total[community[i]] += k[i];
        for &(j, w) in row {
            if community[i] == community[j] {
                inside[community[i]] += w;
            }
        }
    }
    inside
        .iter()
        .zip(&total)
        .map(|(&a, &t)| a / m2 - (t / m2) * (t / m2))
        .sum()
}

/// Modularity (resolution 1) of a node partition of `g`.
pub fn modularity(g: &Graph, community: &[usize]) -> f64 {
    modularity_of(&WeightedGraph::from_graph(g), community)
}

/// Relabels arbitrary ids to `0..count` by first appearance.
fn compact(labels: &mut [usize]) -> usize {
    let mut map = std::collections::BTreeMap::new();
    for l in labels.iter_mut() {
        let next = map.len();
        *l = *map.entry(*l).or_insert(next);
    }
    map.len()
}

/// One local-moving phase. Returns the modularity after every pass and
/// whether any node moved.
fn local_moving(
    g: &WeightedGraph,
    community: &mut [usize],
    rng: &mut impl Rng,
    history: &mut Vec<f64>,
) -> bool {
    let n = g.len();
    let k = g.strengths();
    let m2: f64 = k.iter().sum();
    if m2 == 0.0 {
        return false;
    }
    let mut total = vec![0.0; n];
    for i in 0..n {
        total[community[i]] += k[i];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    let mut link = vec![0.0; n];
    let mut touched = Vec::new();
    loop {
        let mut moved = false;
        for &i in &order {
            let own = community[i];
            total[own] -= k[i];
            for &(j, w) in &g.adj[i] {
                if j == i {
                    continue;
                }
                let c = community[j];
                if link[c] == 0.0 {
                    touched.push(c);
                }
                link[c] += w;
            }
            touched.sort_unstable();
            let gain = |c: usize, link_c: f64| link_c - total[c] * k[i] / m2;
            let mut best = own;
            let mut best_gain = gain(own, link[own]);
            for &c in &touched {
                let cand = gain(c, link[c]);
                if cand > best_gain + 1e-12 {
                    best = c;
                    best_gain = cand;
                }
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            touched.clear();
            total[best] += k[i];
            if best != own {
                community[i] = best;
                moved = true;
            }
        }
        history.push(modularity_of(g, community));
        if !moved {
            break;
        }
        moved_any = true;
    }
    moved_any
}

/// Multi-level Louvain communities of `g` and the modularity of the
/// node-level partition after every local-moving pass.
pub fn louvain_communities(g: &Graph, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = seeded(seed);
    let mut level = WeightedGraph::from_graph(g);
    let mut node_comm: Vec<usize> = (0..g.node_count()).collect();
    let mut history = vec![modularity_of(&level, &node_comm)];
    loop {
        let mut comm: Vec<usize> = (0..level.len()).collect();
        let mut level_history = Vec::new();
        let moved = local_moving(&level, &mut comm, &mut rng, &mut level_history);
        if !moved {
            break;
        }
        let count = compact(&mut comm);
        for c in node_comm.iter_mut() {
            *c = comm[*c];
        }
        // Level modularity equals node-level modularity of the projected partition.
        history.extend(level_history);
        level = level.coarsen(&comm, count);
        if count == 1 {
            break;
        }
    }
    compact(&mut node_comm);
    (node_comm, history)
}

/// Louvain communities coalesced (or split) into exactly `n_clients` clients.
///
/// While there are too many communities, the smallest one is merged into the
/// smallest remaining one. While there are too few, the largest is split in
/// half along its breadth-first order. Ties go to the lowest id. Client ids
/// are finally ordered by each client's lowest node id.
pub fn louvain_partition(g: &Graph, n_clients: usize, seed: u64) -> Result<CommunityAssignment> {
    check_client_count(g, n_clients)?;
    let (mut comm, _) = louvain_communities(g, seed);
    let mut count = comm.iter().max().map_or(0, |m| m + 1);
    let smallest = |sizes: &[usize], skip: Option<usize>| {
        (0..sizes.len())
            .filter(|&c| Some(c) != skip && sizes[c] > 0)
            .min_by_key(|&c| (sizes[c], c))
            .unwrap()
    };
    let mut sizes = vec![0usize; count];
    for &c in &comm {
        sizes[c] += 1;
    }
    let mut live = count;
    while live > n_clients {
        let src = smallest(&sizes, None);
        let dst = smallest(&sizes, Some(src));
        for c in comm.iter_mut().filter(|c| **c == src) {
            *c = dst;
        }
        sizes[dst] += sizes[src];
        sizes[src] = 0;
        live -= 1;
    }
    if live < n_clients {
        let neigh = g.neighbors();
        while live < n_clients {
            let big = (0..sizes.len())
                .max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))
                .unwrap();
            let order = bfs_order_within(&neigh, &comm, big);
            let half = order.len() / 2;
            sizes.push(0);
            for &node in &order[order.len() - half..] {
                comm[node] = count;
            }
            sizes[count] = half;
            sizes[big] -= half;
            count += 1;
            live += 1;
        }
    }
    let mut first_seen = vec![usize::MAX; count];
    for (node, &c) in comm.iter().enumerate() {
        if first_seen[c] == usize::MAX {
            first_seen[c] = node;
        }
    }
    let mut ranked: Vec<usize> = (0..count).filter(|&c| first_seen[c] != usize::MAX).collect();
    ranked.sort_by_key(|&c| first_seen[c]);
    let mut relabel = vec![usize::MAX; count];
    for (new, &old) in ranked.iter().enumerate() {
        relabel[old] = new;
    }
    let client_of = comm.iter().map(|&c| relabel[c]).collect();
    CommunityAssignment::new(client_of, n_clients)
}

fn bfs_order_within(neigh: &[Vec<usize>], comm: &[usize], target: usize) -> Vec<usize> {
    let mut seen = vec![false; comm.len()];
    let mut order = Vec::new();
    for start in 0..comm.len() {
        if comm[start] != target || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &neigh[u] {
                if comm[v] == target && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    order
}

/// BFS hop distances from a set of sources; `usize::MAX` where unreachable.
fn hop_distances(neigh: &[Vec<usize>], sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; neigh.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &v in &neigh[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Size-balanced partition grown by multi-source BFS.
///
/// Seeds are spread by farthest-point selection: the first is the node
/// farthest from a seeded random start (within its component), each next one
/// maximizes the hop distance to the chosen seeds (unreachable counts as
/// farthest, ties to the lowest id). Clients then grow one node at a time,
/// always the smallest non-full client with a nonempty frontier; a client
/// whose frontier is exhausted restarts from the lowest unassigned node.
/// Capacities are `⌈n/N⌉` for the first `n mod N` clients and `⌊n/N⌋` after.
pub fn balanced_partition(g: &Graph, n_clients: usize, seed: u64) -> Result<CommunityAssignment> {
    check_client_count(g, n_clients)?;
    let n = g.node_count();
    let neigh = g.neighbors();
    let mut rng = seeded(seed);
    let start = rng.random_range(0..n);
    let from_start = hop_distances(&neigh, &[start]);
    let first = (0..n)
        .filter(|&v| from_start[v] != usize::MAX)
        .max_by_key(|&v| (from_start[v], std::cmp::Reverse(v)))
        .unwrap();
    let mut seeds = vec![first];
    while seeds.len() < n_clients {
        let dist = hop_distances(&neigh, &seeds);
        let next = (0..n)
            .filter(|v| !seeds.contains(v))
            .max_by_key(|&v| (dist[v], std::cmp::Reverse(v)))
            .unwrap();
        seeds.push(next);
    }

    let capacity: Vec<usize> = (0..n_clients)
        .map(|c| n / n_clients + usize::from(c < n % n_clients))
        .collect();
    let mut client_of = vec![usize::MAX; n];
    let mut sizes = vec![0usize; n_clients];
    let mut frontier: Vec<VecDeque<usize>> = vec![VecDeque::new(); n_clients];
    let mut assigned = 0;
    let claim = |node: usize,
                     c: usize,
                     client_of: &mut Vec<usize>,
                     sizes: &mut Vec<usize>,
                     frontier: &mut Vec<VecDeque<usize>>| {
        client_of[node] = c;
        sizes[c] += 1;
        frontier[c].extend(neigh[node].iter().copied());
    };
    for (c, &s) in seeds.iter().enumerate() {
        claim(s, c, &mut client_of, &mut sizes, &mut frontier);
        assigned += 1;
    }
    let mut next_unassigned = 0;
    while assigned < n {
        let mut open: Vec<usize> = (0..n_clients).filter(|&c| sizes[c] < capacity[c]).collect();
        open.sort_by_key(|&c| (sizes[c], c));
        let mut progressed = false;
        for &c in &open {
            while let Some(&v) = frontier[c].front() {
                if client_of[v] == usize::MAX {
                    break;
                }
                frontier[c].pop_front();
            }
            if let Some(v) = frontier[c].pop_front() {
                claim(v, c, &mut client_of, &mut sizes, &mut frontier);
                progressed = true;
                break;
            }
        }
        if !progressed {
            while client_of[next_unassigned] != usize::MAX {
                next_unassigned += 1;
            }
            claim(next_unassigned, open[0], &mut client_of, &mut sizes, &mut frontier);
        }
        assigned += 1;
    }
    CommunityAssignment::new(client_of, n_clients)
}

/// One client's induced subgraph, its masks, and the cached structures the
/// local learner needs (normalized adjacency, degrees, `Â·X`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    client_id: usize,
    graph: Graph,
    global_ids: Vec<usize>,
    masks: NodeMasks,
    adjacency: SparseAdjacency,
    degrees: Vec<usize>,
    propagated_features: Matrix,
}

impl ClientData {
    pub fn new(client_id: usize, graph: Graph, global_ids: Vec<usize>, masks: NodeMasks) -> Result<Self> {
        if global_ids.len() != graph.node_count() {
            return Err(Error::Contract("global id map length differs from node count".into()));
        }
        let n = graph.node_count();
        let mut seen = vec![false; n];
        for &v in masks.train.iter().chain(&masks.val).chain(&masks.test) {
            if v >= n || seen[v] {
                return Err(Error::Contract(format!("mask node {v} out of range or repeated")));
            }
            seen[v] = true;
        }
        let adjacency = normalized_adjacency(&graph);
        let degrees = graph.degrees();
        let propagated_features = adjacency.spmm(graph.features());
        Ok(Self {
            client_id,
            graph,
            global_ids,
            masks,
            adjacency,
            degrees,
            propagated_features,
        })
    }

    /// Treats a whole graph as a single client's data.
    pub fn whole(graph: Graph, masks: NodeMasks) -> Result<Self> {
        let ids = (0..graph.node_count()).collect();
        Self::new(0, graph, ids, masks)
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn global_ids(&self) -> &[usize] {
        &self.global_ids
    }

    pub fn masks(&self) -> &NodeMasks {
        &self.masks
    }

    pub fn adjacency(&self) -> &SparseAdjacency {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn propagated_features(&self) -> &Matrix {
        &self.propagated_features
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes()
    }

    pub fn with_masks(&self, masks: NodeMasks) -> Result<Self> {
        Self::new(self.client_id, self.graph.clone(), self.global_ids.clone(), masks)
    }

    /// Per-class node counts of the local subgraph.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes()];
        for &l in self.graph.labels() {
            hist[l] += 1;
        }
        hist
    }
}

/// Induced client subgraphs with per-client stratified masks. Client `c`
/// splits its masks with a seed derived from `(seed, c)`.
pub fn extract_subgraphs(
    g: &Graph,
    a: &CommunityAssignment,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if a.client_of().len() != g.node_count() {
        return Err(Error::Contract("assignment length differs from node count".into()));
    }
    a.members()
        .into_iter()
        .enumerate()
        .map(|(c, nodes)| {
            let local = g.induced(&nodes)?;
            let masks = split_masks(&local, ratios, derive_seed(seed, c as u64))?;
            ClientData::new(c, local, nodes, masks)
        })
        .collect()
}

fn drop_count(len: usize, rate: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("drop_rate", format!("{rate} outside [0, 1]")));
    }
    Ok(((rate * len as f64) + 1e-9).floor().min(len as f64) as usize)
}

/// Removes `⌊rate·|train|⌋` uniformly chosen nodes from the train mask.
pub fn sparsify_labels(cd: &ClientData, drop_rate: f64, seed: u64) -> Result<ClientData> {
    let train = &cd.masks().train;
    let drop = drop_count(train.len(), drop_rate)?;
    if drop == 0 {
        return Ok(cd.clone());
    }
    let mut rng = seeded(seed);
    let mut removed = vec![false; train.len()];
    for i in index::sample(&mut rng, train.len(), drop) {
        removed[i] = true;
    }
    let mut masks = cd.masks().clone();
    masks.train = train
        .iter()
        .zip(&removed)
        .filter_map(|(&v, &r)| (!r).then_some(v))
        .collect();
    cd.with_masks(masks)
}

/// Removes `⌊rate·m⌋` uniformly chosen undirected edges.
pub fn sparsify_edges(cd: &ClientData, drop_rate: f64, seed: u64) -> Result<ClientData> {
    let edges = cd.graph().edges();
    let drop = drop_count(edges.len(), drop_rate)?;
    if drop == 0 {
        return Ok(cd.clone());
    }
    let mut rng = seeded(seed);
    let mut removed = vec![false; edges.len()];
    for i in index::sample(&mut rng, edges.len(), drop) {
        removed[i] = true;
    }
    let kept = edges
        .iter()
        .zip(&removed)
        .filter_map(|(&e, &r)| (!r).then_some(e))
        .collect();
    let graph = cd.graph().with_edges(kept)?;
    ClientData::new(cd.client_id(), graph, cd.global_ids().to_vec(), cd.masks().clone())
}

/// Partitioning algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partitioner {
    Louvain,
    Balanced,
}

impl Partitioner {
    pub fn run(self, g: &Graph, n_clients: usize, seed: u64) -> Result<CommunityAssignment> {
        match self {
            Partitioner::Louvain => louvain_partition(g, n_clients, seed),
            Partitioner::Balanced => balanced_partition(g, n_clients, seed),
        }
    }
}

impl std::str::FromStr for Partitioner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "louvain" => Ok(Partitioner::Louvain),
            "balanced" | "metis" => Ok(Partitioner::Balanced),
            other => Err(Error::config("method", format!("unknown partitioner `{other}`"))),
        }
    }
}
