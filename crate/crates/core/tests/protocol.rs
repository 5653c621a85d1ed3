mod common;

use std::collections::BTreeMap;

use common::random_params;
use fedsagcl_core::fgl::{blend_local, FglHyper, LscValue, Sfm};
use fedsagcl_core::gcn::{init_params, train_epoch, ModelParams, ParamShape};
use fedsagcl_core::graph::{Graph, NodeMasks};
use fedsagcl_core::matrix::Matrix;
use fedsagcl_core::partition::ClientData;
use fedsagcl_core::protocol::{
    local_statistics, ClientState, DeliveryKind, DownloadMessage, ServerOptions, ServerState, Strategy, UploadMessage,
};
use fedsagcl_core::rng::seeded;
use fedsagcl_core::Error;
use rand::Rng;

fn client_data() -> ClientData {
    let g = Graph::new(
        vec![(0, 1), (1, 2), (2, 3), (0, 3)],
        Matrix::from_rows(&[vec![1.0, 0.2], vec![0.9, 0.0], vec![0.0, 1.0], vec![0.1, 0.8]]),
        vec![0, 0, 1, 1],
        2,
    )
    .unwrap();
    ClientData::whole(g, NodeMasks { train: vec![0, 2], val: vec![], test: vec![1, 3] }).unwrap()
}

fn shape() -> ParamShape {
    ParamShape { feature_dim: 2, hidden_dim: 3, num_classes: 2 }
}

fn message(params: ModelParams, round: u64, cluster_lsc: Option<f64>) -> DownloadMessage {
    DownloadMessage { params, round, cluster_lsc }
}

#[test]
fn empty_mailbox_trip_is_one_local_step() {
    let cd = client_data();
    let init = init_params(2, 3, 2, 1);
    let mut client = ClientState::new(cd.clone(), init.clone());
    let up = client.client_trip(&FglHyper::default(), 0.1).unwrap();
    assert_eq!(up.params, train_epoch(&init, &cd, 0.1).unwrap());
    assert_eq!(up.tau, 0);
    let (sfm, lsc) = local_statistics(&up.params, &cd, &FglHyper::default()).unwrap();
    assert_eq!((up.sfm, up.lsc), (sfm, lsc));
}

#[test]
fn direct_message_replaces_params_and_sets_tau() {
    let cd = client_data();
    let server_model = random_params(&mut seeded(2), shape());
    let mut client = ClientState::new(cd.clone(), init_params(2, 3, 2, 1));
    client.mailbox.deliver(message(server_model.clone(), 5, None));
    let up = client.client_trip(&FglHyper::default(), 0.1).unwrap();
    assert_eq!(up.tau, 5);
    assert_eq!(up.params, train_epoch(&server_model, &cd, 0.1).unwrap());
}

#[test]
fn broadcast_blends_three_to_one() {
    let cd = client_data();
    let hyper = FglHyper::default();
    let local = random_params(&mut seeded(4), shape());
    let server_model = random_params(&mut seeded(5), shape());
    let (_, local_lsc) = local_statistics(&local, &cd, &hyper).unwrap();
    // Cluster confidence three times the local one gives weights 0.75 / 0.25.
    let mut client = ClientState::new(cd, local.clone());
    client.mailbox.deliver(message(server_model.clone(), 2, Some(3.0 * local_lsc.clamped)));
    client.apply_mailbox(&hyper).unwrap();
    assert_eq!(client.tau, 2);
    for ((p, s), l) in client.params.as_slice().iter().zip(server_model.as_slice()).zip(local.as_slice()) {
        assert!((p - (0.75 * s + 0.25 * l)).abs() < 1e-12);
    }
    let explicit = blend_local(&server_model, &local, 3.0, 1.0).unwrap();
    for (a, b) in explicit.as_slice().iter().zip(client.params.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn only_the_last_of_three_messages_is_used() {
    let cd = client_data();
    let mut client = ClientState::new(cd.clone(), init_params(2, 3, 2, 1));
    let models: Vec<ModelParams> = (0..3).map(|i| random_params(&mut seeded(10 + i), shape())).collect();
    for (r, m) in models.iter().enumerate() {
        client.mailbox.deliver(message(m.clone(), r as u64 + 1, None));
        assert_eq!(client.mailbox.len(), 1);
    }
    assert_eq!(client.mailbox.discarded(), 2);
    let up = client.client_trip(&FglHyper::default(), 0.1).unwrap();
    assert_eq!(up.tau, 3);
    assert_eq!(up.params, train_epoch(&models[2], &cd, 0.1).unwrap());
    assert!(client.mailbox.is_empty());
}

#[test]
fn empty_train_mask_refuses_to_train() {
    let cd = client_data().with_masks(NodeMasks { train: vec![], val: vec![], test: vec![0] }).unwrap();
    let mut client = ClientState::new(cd, init_params(2, 3, 2, 1));
    assert!(matches!(client.client_trip(&FglHyper::default(), 0.1), Err(Error::Training(_))));
}

fn upload(rng: &mut fedsagcl_core::rng::SimRng, id: usize, tau: u64) -> UploadMessage {
    let sfm = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    UploadMessage {
        client_id: id,
        tau,
        params: random_params(rng, shape()),
        sfm: Sfm::from_flat(2, sfm).unwrap(),
        lsc: LscValue::new(rng.random_range(-1.0..5.0)),
    }
}

/// Random interleavings: any client may upload at any time, clients stamp
/// uploads with the last round they heard from.
#[test]
fn server_invariants_under_random_interleavings() {
    for seed in 0..40u64 {
        let mut rng = seeded(seed);
        let n = rng.random_range(2..=9);
        let k = rng.random_range(1..=n);
        let theta = rng.random_range(0.0..=1.0);
        let hyper = FglHyper { theta, ..FglHyper::default() };
        let sizes = (0..n).map(|i| (i, 1)).collect();
        let mut server =
            ServerState::new(Strategy::FedSaGcl, hyper, ServerOptions::default(), k, ModelParams::zeros(shape()), sizes)
                .unwrap();
        let mut heard = vec![0u64; n];
        let mut last_round = 0;
        for _ in 0..200 {
            let id = rng.random_range(0..n);
            let msg = upload(&mut rng, id, heard[id]);
            let outcome = server.handle_upload(msg).unwrap();
            match &outcome.report {
                None => {
                    assert!(outcome.deliveries.is_empty());
                    assert_eq!(server.round(), last_round);
                }
                Some(report) => {
                    assert_eq!(server.round(), last_round + 1);
                    last_round = server.round();
                    assert_eq!(server.queued(), 0);
                    assert!(server.knowledge_base().values().all(|e| e.tau < server.round()));
                    let mut seen = BTreeMap::new();
                    for d in &outcome.deliveries {
                        *seen.entry(d.dst).or_insert(0) += 1;
                        match d.kind {
                            DeliveryKind::Personal => assert!(report.uploaded.contains(&d.dst)),
                            DeliveryKind::Broadcast => {
                                assert!(!report.uploaded.contains(&d.dst));
                                assert!(d.message.cluster_lsc.is_some_and(|l| l > 0.0));
                            }
                            DeliveryKind::Baseline => panic!("baseline delivery from clustered server"),
                        }
                        heard[d.dst] = d.message.round;
                    }
                    assert!(seen.values().all(|&c| c == 1), "one delivery per client per round");
                }
            }
            assert!(server.knowledge_base().len() <= n);
        }
    }
}
