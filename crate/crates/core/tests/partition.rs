use fedsagcl_core::graph::{Graph, SplitRatios};
use fedsagcl_core::matrix::Matrix;
use fedsagcl_core::partition::{
    balanced_partition, extract_subgraphs, louvain_communities, louvain_partition, modularity, sparsify_edges,
    sparsify_labels, CommunityAssignment, Partitioner,
};
use proptest::prelude::*;

fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
    Graph::new(edges.to_vec(), Matrix::zeros(n, 1), vec![0; n], 2).unwrap()
}

/// Dense textbook modularity: (1/2m) Σ_ij [A_ij − k_i k_j / 2m] δ(c_i, c_j).
fn naive_modularity(n: usize, edges: &[(usize, usize)], comm: &[usize]) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in edges {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if comm[i] == comm[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Every set partition of 0..n as a restricted growth string.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for c in 0..=next {
            prefix.push(c);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn two_triangles_match_brute_force_optimum() {
    let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
    let g = graph(6, &edges);
    let parts = all_partitions(6);
    assert_eq!(parts.len(), 203);
    let best = parts
        .iter()
        .max_by(|a, b| naive_modularity(6, &edges, a).total_cmp(&naive_modularity(6, &edges, b)))
        .unwrap();
    for p in &parts {
        assert!((modularity(&g, p) - naive_modularity(6, &edges, p)).abs() < 1e-12);
    }
    for seed in 0..5 {
        let a = louvain_partition(&g, 2, seed).unwrap();
        assert!(same_partition(a.client_of(), best), "seed {seed}: {:?}", a.client_of());
    }
}

#[test]
fn ring_of_cliques_matches_clique_respecting_optimum() {
    let mut edges = Vec::new();
    for c in 0..4 {
        let base = 5 * c;
        for u in 0..5 {
            for v in u + 1..5 {
                edges.push((base + u, base + v));
            }
        }
        edges.push((base + 4, (base + 5) % 20));
    }
    let g = graph(20, &edges);
    let best = all_partitions(4)
        .into_iter()
        .map(|p| (0..20).map(|v| p[v / 5]).collect::<Vec<_>>())
        .max_by(|a, b| naive_modularity(20, &edges, a).total_cmp(&naive_modularity(20, &edges, b)))
        .unwrap();
    let cliques: Vec<usize> = (0..20).map(|v| v / 5).collect();
    assert!(same_partition(&best, &cliques));
    for seed in 0..5 {
        let a = louvain_partition(&g, 4, seed).unwrap();
        assert!(same_partition(a.client_of(), &cliques), "seed {seed}");
    }
}

#[test]
fn partitioner_names_parse() {
    assert_eq!("louvain".parse::<Partitioner>().unwrap(), Partitioner::Louvain);
    assert_eq!("balanced".parse::<Partitioner>().unwrap(), Partitioner::Balanced);
    assert!("spectral".parse::<Partitioner>().is_err());
}

fn arb_graph() -> impl Strategy<Value = Graph> {
    (2usize..40).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..3 * n).prop_map(move |edges| {
            let labels = (0..n).map(|v| v % 3).collect();
            Graph::new(edges, Matrix::zeros(n, 2), labels, 3).unwrap()
        })
    })
}

fn check_assignment(g: &Graph, a: &CommunityAssignment, n_clients: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.client_of().len(), g.node_count());
    prop_assert_eq!(a.num_clients(), n_clients);
    prop_assert_eq!(a.sizes().iter().sum::<usize>(), g.node_count());
    prop_assert!(a.sizes().iter().all(|&s| s >= 1));
    Ok(())
}

proptest! {
    #[test]
    fn balanced_sizes_differ_by_at_most_one(g in arb_graph(), k in 1usize..8, seed in any::<u64>()) {
        let k = k.min(g.node_count());
        let a = balanced_partition(&g, k, seed).unwrap();
        check_assignment(&g, &a, k)?;
        let sizes = a.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(balanced_partition(&g, k, seed).unwrap(), a);
    }

    #[test]
    fn louvain_assignment_valid_and_history_monotone(g in arb_graph(), k in 1usize..8, seed in any::<u64>()) {
        let k = k.min(g.node_count());
        let a = louvain_partition(&g, k, seed).unwrap();
        check_assignment(&g, &a, k)?;
        let (comm, history) = louvain_communities(&g, seed);
        prop_assert_eq!(comm.len(), g.node_count());
        for w in history.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "history {:?}", history);
        }
    }

    #[test]
    fn extraction_keeps_exactly_the_induced_edges(g in arb_graph(), k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(g.node_count());
        let a = balanced_partition(&g, k, seed).unwrap();
        let clients = extract_subgraphs(&g, &a, SplitRatios::default(), seed).unwrap();
        let total: usize = clients.iter().map(|c| c.graph().edge_count()).sum();
        prop_assert!(total <= g.edge_count());
        prop_assert_eq!(total + a.cut_edges(&g), g.edge_count());
        for cd in &clients {
            for &(u, v) in cd.graph().edges() {
                let (gu, gv) = (cd.global_ids()[u], cd.global_ids()[v]);
                prop_assert!(g.edges().contains(&(gu.min(gv), gu.max(gv))));
                prop_assert_eq!(g.labels()[gu], cd.graph().labels()[u]);
            }
        }
    }

    #[test]
    fn sparsify_is_deterministic_and_idle_at_zero(g in arb_graph(), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let a = balanced_partition(&g, 1, 0).unwrap();
        let cd = extract_subgraphs(&g, &a, SplitRatios::default(), seed).unwrap().remove(0);
        prop_assert_eq!(&sparsify_labels(&cd, 0.0, seed).unwrap(), &cd);
        prop_assert_eq!(&sparsify_edges(&cd, 0.0, seed).unwrap(), &cd);
        let l = sparsify_labels(&cd, rate, seed).unwrap();
        prop_assert_eq!(&l, &sparsify_labels(&cd, rate, seed).unwrap());
        let kept = cd.masks().train.len() - (rate * cd.masks().train.len() as f64).floor() as usize;
        prop_assert_eq!(l.masks().train.len(), kept);
        prop_assert_eq!(&l.masks().test, &cd.masks().test);
        let e = sparsify_edges(&cd, rate, seed).unwrap();
        let m = cd.graph().edge_count();
        prop_assert_eq!(e.graph().edge_count(), m - (rate * m as f64).floor() as usize);
        prop_assert_eq!(e.masks(), cd.masks());
    }
}
