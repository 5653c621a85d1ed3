mod common;

use common::*;
use fedsagcl_core::fgl::{
    aggregate_models, blend_local, cluster_set, compute_sfm, cosine_similarity, label_propagation, staleness_weights,
    KnowledgeBase, KnowledgeBaseEntry, Sfm,
};
use fedsagcl_core::gcn::{ModelParams, ParamShape, SoftLabelMatrix};
use fedsagcl_core::matrix::Matrix;
use fedsagcl_core::rng::seeded;
use proptest::prelude::*;

fn shape() -> ParamShape {
    ParamShape { feature_dim: 2, hidden_dim: 2, num_classes: 2 }
}

fn kb_from(sfms: &[Vec<f64>], c: usize) -> KnowledgeBase {
    sfms.iter()
        .enumerate()
        .map(|(i, s)| (i, entry(i, ModelParams::zeros(shape()), s.clone(), c, 1.0, 0)))
        .collect()
}

proptest! {
    #[test]
    fn sfm_is_symmetric_and_quadratic(seed in any::<u64>(), scale in 0.01f64..10.0) {
        let inst = random_instance(seed, 8);
        let c = inst.soft.num_classes();
        let sfm = compute_sfm(&inst.soft, &inst.cd).unwrap();
        for a in 0..c {
            for b in 0..c {
                prop_assert!((sfm.get(a, b) - sfm.get(b, a)).abs() <= 1e-12 * sfm.norm().max(1.0));
                prop_assert!(sfm.get(a, b) >= 0.0);
            }
        }
        // Scaled rows are no longer distributions, so only the oracle applies.
        let scaled: Vec<Vec<f64>> = inst.rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let reference = naive_sfm(&inst.adj, &scaled, c);
        for (x, y) in sfm.flat().iter().zip(&reference) {
            prop_assert!((x * scale * scale - y).abs() <= 1e-9 * y.abs().max(1e-300));
        }
        let scaled_sfm = Sfm::from_flat(c, reference).unwrap();
        let other = Sfm::from_flat(c, naive_sfm(&inst.adj, &inst.rows, c)).unwrap();
        let s1 = cosine_similarity(&scaled_sfm, &other).unwrap();
        let s2 = cosine_similarity(&sfm, &other).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(a in proptest::collection::vec(0.0f64..5.0, 9), b in proptest::collection::vec(0.0f64..5.0, 9), c in 1e-3f64..1e3) {
        let sa = Sfm::from_flat(3, a.clone()).unwrap();
        let sb = Sfm::from_flat(3, b).unwrap();
        let scaled = Sfm::from_flat(3, a.iter().map(|v| v * c).collect()).unwrap();
        let s = cosine_similarity(&sa, &sb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((cosine_similarity(&scaled, &sb).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn clusters_contain_self_and_shrink_with_theta(
        sfms in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..8),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let kb = kb_from(&sfms, 2);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        for &i in kb.keys() {
            let wide = cluster_set(i, &kb, lo).unwrap();
            let narrow = cluster_set(i, &kb, hi).unwrap();
            prop_assert!(narrow.contains(&i));
            prop_assert!(narrow.is_subset(&wide));
        }
    }

    #[test]
    fn propagated_rows_sum_to_one(seed in any::<u64>(), lambda in 0.0f64..=1.0, k in 0usize..6) {
        let inst = random_instance(seed, 8);
        let lp = label_propagation(&inst.soft, &inst.cd, lambda, k).unwrap();
        for i in 0..lp.rows() {
            let s: f64 = lp.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        if lambda == 1.0 || k == 0 {
            prop_assert_eq!(lp.values(), inst.soft.values());
        }
    }

    #[test]
    fn staleness_weights_normalized_and_fresher_is_heavier(
        lsc in proptest::collection::vec(-1.0f64..20.0, 1..7),
        t in 2u64..30,
        alpha in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let entries: Vec<KnowledgeBaseEntry> = lsc
            .iter()
            .enumerate()
            .map(|(i, &l)| entry(i, ModelParams::zeros(shape()), vec![1.0; 4], 2, l, rng.random_range(0..t)))
            .collect();
        let refs: Vec<&KnowledgeBaseEntry> = entries.iter().collect();
        let w = staleness_weights(&refs, t, alpha).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        // Same confidence, older version: never more weight.
        let mut pair = [entries[0].clone(), entries[0].clone()];
        pair[1].client_id = 1;
        pair[1].tau = pair[0].tau.saturating_sub(1);
        let refs: Vec<&KnowledgeBaseEntry> = pair.iter().collect();
        let w = staleness_weights(&refs, t, alpha).unwrap();
        prop_assert!(w[0] >= w[1]);
    }

    #[test]
    fn blend_is_convex(seed in any::<u64>(), ls in 1e-6f64..100.0, ll in 1e-6f64..100.0) {
        let mut rng = seeded(seed);
        let s = random_params(&mut rng, shape());
        let l = random_params(&mut rng, shape());
        let b = blend_local(&s, &l, ls, ll).unwrap();
        for ((x, y), z) in s.as_slice().iter().zip(l.as_slice()).zip(b.as_slice()) {
            prop_assert!(z >= &(x.min(*y) - 1e-12) && z <= &(x.max(*y) + 1e-12));
        }
        prop_assert_eq!(blend_local(&l, &l, ls, ll).unwrap(), l);
    }

    #[test]
    fn aggregate_matches_loop_oracle(seed in any::<u64>(), m in 1usize..5) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let models: Vec<ModelParams> = (0..m).map(|_| random_params(&mut rng, shape())).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let ours = aggregate_models(&refs, &w).unwrap();
        let flat: Vec<Vec<f64>> = models.iter().map(|p| p.as_slice().to_vec()).collect();
        for (a, b) in ours.as_slice().iter().zip(naive_aggregate(&flat, &w)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn sim_pairs_pick_threshold_members() {
    // sim(0,1) = 0.9 and sim(0,2) = 0.3 by construction on unit vectors.
    let a = vec![1.0, 0.0, 0.0, 0.0];
    let b = vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0, 0.0];
    let c = vec![0.3, 0.0, (1.0f64 - 0.09).sqrt(), 0.0];
    let kb = kb_from(&[a, b, c], 2);
    assert_eq!(cluster_set(0, &kb, 0.5).unwrap().into_iter().collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn isolated_rows_reset_and_degrees_ignore_self() {
    let g = fedsagcl_core::graph::Graph::new(vec![], Matrix::zeros(1, 1), vec![0], 2).unwrap();
    let cd = fedsagcl_core::partition::ClientData::whole(g, Default::default()).unwrap();
    let soft = SoftLabelMatrix::new(Matrix::from_rows(&[vec![0.3, 0.7]])).unwrap();
    let zero_lambda = label_propagation(&soft, &cd, 0.0, 1).unwrap();
    assert_eq!(zero_lambda.row(0), &[0.5, 0.5]);
    let half = label_propagation(&soft, &cd, 0.5, 1).unwrap();
    assert!((half.row(0)[0] - 0.3).abs() < 1e-15 && (half.row(0)[1] - 0.7).abs() < 1e-15);
}
