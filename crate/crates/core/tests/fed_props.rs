//! Federated simulator checks against centralized references.

use dpfew::data::{pretrain_backbone, FewShotDataset, PretrainConfig, Split, SyntheticTaskSpec};
use dpfew::fed::{
    aggregate_round, comm_cost, fed_train, label_skew, local_update, shard_clients, AdaptiveClipState, ClientShard,
    ClipConfig, FedConfig, ServerOptimizer, ServerState, ShardDistribution,
};
use dpfew::model::{Architecture, ArchitectureDescriptor, Mode, ModelState};
use dpfew::protocol::median;
use dpfew::rng::{self, Domain};
use proptest::prelude::*;

fn task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        shift: 0.5,
        ..SyntheticTaskSpec::default()
    }
}

fn arch() -> Architecture {
    let t = task();
    Architecture::new(t.input_dim, 16, 8, t.classes)
}

fn backbone() -> ModelState {
    pretrain_backbone(&task(), arch(), &PretrainConfig::default(), 0).unwrap()
}

/// Backbone with a random head, in `mode`, so every trainable block moves.
fn start_model(mode: Mode) -> ModelState {
    let mut m = backbone().with_mode(mode);
    let mut r = rng::stream(1, Domain::Experiment, 0);
    let head = arch().head_params();
    for p in &mut m.params_mut()[..head] {
        *p = 0.2 * rng::standard_normal(&mut r);
    }
    m
}

fn pooled_mean_grad(m: &ModelState, data: &FewShotDataset) -> Vec<f64> {
    let mut g = vec![0.0; m.trainable_len()];
    for i in 0..data.len() {
        for (a, b) in g.iter_mut().zip(m.per_example_grad(data.x(i), data.y(i)).unwrap()) {
            *a += b;
        }
    }
    g.iter().map(|v| v / data.len() as f64).collect()
}

#[test]
fn noiseless_full_cohort_fedavg_equals_centralized_sgd() {
    let data = task().sample(10, Split::Train, 2, 0).unwrap();
    let clients = 5;
    let per_client = data.len() / clients;
    for mode in Mode::ALL {
        let shards = shard_clients(&data, clients, ShardDistribution::Iid, None, 3).unwrap();
        assert!(shards.iter().all(|s| s.data.len() == per_client));
        let lr = 0.1;
        let mut server = ServerState::new(start_model(mode), ServerOptimizer::FedAvg { learning_rate: 1.0 }, 1.0);
        let mut reference = start_model(mode);
        let mut r = rng::stream(0, Domain::FedNoise, 0);
        for round in 0..20 {
            let deltas: Vec<Vec<f64>> = shards
                .iter()
                .map(|s| {
                    let mut cr = rng::stream(round, Domain::FedClient, s.id as u64);
                    local_update(s, &server.model, 1, per_client, lr, &mut cr).unwrap()
                })
                .collect();
            aggregate_round(&mut server, deltas, false, &mut r).unwrap();
            let g = pooled_mean_grad(&reference, &data);
            for (p, gi) in reference.trainable_mut().iter_mut().zip(&g) {
                *p -= lr * gi;
            }
        }
        let diff = server
            .model
            .params()
            .iter()
            .zip(reference.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{mode}: max diff {diff:e}");
        assert_eq!(server.round, 20);
    }
}

#[test]
fn fed_train_without_noise_matches_centralized_sgd() {
    let data = task().sample(10, Split::Train, 4, 0).unwrap();
    let test = task().sample(20, Split::Test, 4, 1).unwrap();
    let cfg = FedConfig {
        rounds: 20,
        clients: 5,
        cohort: 5,
        mode: Mode::Film,
        local_epochs: 1,
        local_batch: 10,
        client_lr: 0.2,
        server: ServerOptimizer::FedAvg { learning_rate: 1.0 },
        clip: ClipConfig {
            adaptive: false,
            ..ClipConfig::default()
        },
        max_examples_per_client: None,
        ..FedConfig::default()
    };
    let out = fed_train(&data, &test, &backbone(), &cfg, 7).unwrap();
    let mut reference = backbone().with_mode(Mode::Film);
    reference.reset_adapters();
    for _ in 0..cfg.rounds {
        let g = pooled_mean_grad(&reference, &data);
        for (p, gi) in reference.trainable_mut().iter_mut().zip(&g) {
            *p -= cfg.client_lr * gi;
        }
    }
    let diff = out
        .server
        .model
        .params()
        .iter()
        .zip(reference.params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "max diff {diff:e}");
    assert!(out.privacy.is_none());
    assert_eq!(out.log.len(), cfg.rounds);
}

/// Empirical γ-quantile: smallest norm with at least γ of the norms at or below it.
fn empirical_quantile(norms: &[f64], gamma: f64) -> f64 {
    let mut s = norms.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((gamma * s.len() as f64).ceil() as usize).max(1);
    s[k - 1]
}

#[test]
fn adaptive_clip_converges_to_target_quantile() {
    let mut r = rng::stream(5, Domain::Experiment, 0);
    let len = arch().trainable_len(Mode::Head);
    for (scale, start) in [(0.5, 10.0), (2.0, 0.05), (1.0, 1.0)] {
        let norms: Vec<f64> = (0..200).map(|_| scale * (0.5 * rng::standard_normal(&mut r)).exp()).collect();
        // static updates with the drawn norms along a fixed direction
        let deltas: Vec<Vec<f64>> = norms
            .iter()
            .map(|n| {
                let mut d = vec![0.0; len];
                d[0] = *n;
                d
            })
            .collect();
        let mut server = ServerState::new(start_model(Mode::Head), ServerOptimizer::FedAvg { learning_rate: 0.0 }, start);
        server.adaptive = Some(AdaptiveClipState {
            clip: start,
            target_quantile: 0.1,
            learning_rate: 0.2,
            count_noise_std: 0.0,
        });
        let mut nr = rng::stream(0, Domain::FedNoise, 0);
        for _ in 0..200 {
            aggregate_round(&mut server, deltas.clone(), false, &mut nr).unwrap();
        }
        let q = empirical_quantile(&norms, 0.1);
        assert!((server.clip / q - 1.0).abs() <= 0.05, "clip {} vs quantile {q}", server.clip);
    }
}

#[test]
fn adaptive_clip_single_update_arithmetic() {
    let len = arch().trainable_len(Mode::Head);
    let mut server = ServerState::new(start_model(Mode::Head), ServerOptimizer::FedAvg { learning_rate: 1.0 }, 10.0);
    server.adaptive = Some(AdaptiveClipState {
        clip: 10.0,
        target_quantile: 0.1,
        learning_rate: 0.2,
        count_noise_std: 0.0,
    });
    let deltas = vec![vec![0.01; len]; 4];
    let mut r = rng::stream(0, Domain::FedNoise, 0);
    let stats = aggregate_round(&mut server, deltas, false, &mut r).unwrap();
    assert_eq!(stats.unclipped_fraction, 1.0);
    assert!((server.clip - 8.353).abs() < 5e-4, "{}", server.clip);
}

#[test]
fn private_aggregation_needs_a_ledger() {
    let len = arch().trainable_len(Mode::Head);
    let mut server = ServerState::new(start_model(Mode::Head), ServerOptimizer::fed_adam(0.01), 1.0);
    let mut r = rng::stream(0, Domain::FedNoise, 0);
    let err = aggregate_round(&mut server, vec![vec![0.0; len]], true, &mut r).unwrap_err();
    assert_eq!(err.kind(), "config");
}

fn class_data() -> FewShotDataset {
    task().sample(40, Split::Train, 1, 0).unwrap()
}

#[test]
fn iid_sharding_is_even_disjoint_and_seeded() {
    let data = task().sample(20, Split::Train, 1, 0).unwrap();
    assert_eq!(data.len(), 100);
    let shards = shard_clients(&data, 10, ShardDistribution::Iid, None, 3).unwrap();
    assert!(shards.iter().all(|s| s.data.len() == 10));
    let again = shard_clients(&data, 10, ShardDistribution::Iid, None, 3).unwrap();
    for (a, b) in shards.iter().zip(&again) {
        assert_eq!(a.data, b.data);
    }
    // disjoint cover: every example appears exactly once
    let mut seen: Vec<Vec<u64>> = shards
        .iter()
        .flat_map(|s| (0..s.data.len()).map(|i| s.data.x(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    let mut all: Vec<Vec<u64>> = (0..data.len()).map(|i| data.x(i).iter().map(|v| v.to_bits()).collect()).collect();
    seen.sort();
    all.sort();
    assert_eq!(seen, all);
    assert!(shard_clients(&data, 101, ShardDistribution::Iid, None, 3).is_err());
}

#[test]
fn shard_caps_are_respected() {
    let data = class_data();
    for dist in [ShardDistribution::Iid, ShardDistribution::Heterogeneous { concentration: 0.3 }] {
        let shards = shard_clients(&data, 8, dist, Some(12), 5).unwrap();
        assert!(shards.iter().all(|s| !s.data.is_empty() && s.data.len() <= 12));
    }
}

#[test]
fn heterogeneous_sharding_skews_labels_more_than_iid() {
    let data = class_data();
    let mean_skew = |dist| {
        (0..100u64)
            .map(|s| label_skew(&shard_clients(&data, 10, dist, None, s).unwrap(), data.classes))
            .sum::<f64>()
            / 100.0
    };
    let iid = mean_skew(ShardDistribution::Iid);
    let het = mean_skew(ShardDistribution::Heterogeneous { concentration: 0.5 });
    assert!(het > iid, "heterogeneous {het} vs iid {iid}");
}

#[test]
fn local_update_edge_cases() {
    let data = task().sample(3, Split::Train, 6, 0).unwrap();
    let client = ClientShard { id: 0, data: data.clone() };
    for mode in Mode::ALL {
        let global = start_model(mode);
        let mut r = rng::stream(0, Domain::FedClient, 0);
        let zero = local_update(&client, &global, 0, 4, 0.1, &mut r).unwrap();
        assert_eq!(zero.len(), global.trainable_len());
        assert!(zero.iter().all(|d| *d == 0.0));

        let lr = 0.07;
        let one = local_update(&client, &global, 1, data.len(), lr, &mut r).unwrap();
        let g = pooled_mean_grad(&global, &data);
        for (d, gi) in one.iter().zip(&g) {
            assert!((d + lr * gi).abs() < 1e-10);
        }
        // frozen coordinates are not part of the payload at all
        assert_eq!(one.len() as u64, comm_cost(&global, mode));
    }
}

#[test]
fn private_run_is_deterministic_and_ledger_round_trips() {
    let data = task().sample(40, Split::Train, 8, 0).unwrap();
    let test = task().sample(20, Split::Test, 8, 1).unwrap();
    let cfg = FedConfig {
        rounds: 30,
        clients: 40,
        cohort: 8,
        epsilon: Some(2.0),
        local_epochs: 1,
        local_batch: 5,
        clip: ClipConfig {
            count_noise_std: Some(5.0),
            ..ClipConfig::default()
        },
        ..FedConfig::default()
    };
    let a = fed_train(&data, &test, &backbone(), &cfg, 11).unwrap();
    let b = fed_train(&data, &test, &backbone(), &cfg, 11).unwrap();
    assert_eq!(a.server.model, b.server.model);
    assert_eq!(a.log, b.log);
    let p = a.privacy.unwrap();
    assert!((p.epsilon - 2.0).abs() <= 1e-3, "ε {}", p.epsilon);
    assert!(p.epsilon <= 2.0 + 1e-12);
    assert_eq!(p.ledger.sample_rate, 8.0 / 40.0);
    assert_eq!(p.ledger.rounds, 30);
    assert_eq!(p.delta, 40f64.powf(-1.1));
    let c = fed_train(&data, &test, &backbone(), &cfg, 12).unwrap();
    assert_ne!(a.server.model, c.server.model);
}

#[test]
fn non_private_beats_private() {
    let t = task();
    let test = t.sample(100, Split::Test, 0, 1).unwrap();
    let base = FedConfig {
        rounds: 30,
        clients: 50,
        cohort: 10,
        accounting_cohort: Some(50),
        local_epochs: 1,
        local_batch: 8,
        client_lr: 0.05,
        server: ServerOptimizer::fed_adam(0.02),
        distribution: ShardDistribution::Heterogeneous { concentration: 0.5 },
        eval_every: 30,
        clip: ClipConfig {
            count_noise_std: Some(20.0),
            ..ClipConfig::default()
        },
        ..FedConfig::default()
    };
    let accuracy = |eps: Option<f64>, seed: u64| {
        let data = t.sample(16, Split::Train, seed, 0).unwrap();
        let cfg = FedConfig { epsilon: eps, ..base.clone() };
        fed_train(&data, &test, &backbone(), &cfg, seed).unwrap().final_accuracy
    };
    let np: Vec<f64> = (0..3).map(|s| accuracy(None, s)).collect();
    let dp: Vec<f64> = (0..3).map(|s| accuracy(Some(2.0), s)).collect();
    assert!(median(&np) >= median(&dp), "non-private {np:?} vs private {dp:?}");
}

#[test]
fn payload_examples() {
    let r18 = ArchitectureDescriptor::resnet18(10);
    let head = 512 * 10 + 10;
    assert_eq!(comm_cost(&r18, Mode::Film), 7808 + head);
    assert_eq!(comm_cost(&r18, Mode::All), 11_200_000 + head);
    assert_eq!(comm_cost(&Architecture::new(8, 32, 64, 10), Mode::Head), 650);
}

proptest! {
    #[test]
    fn payload_ordering(d in 1usize..40, w in 1usize..80, db in 1usize..80, c in 2usize..20) {
        let a = Architecture::new(d, w, db, c);
        let (h, f, all) = (comm_cost(&a, Mode::Head), comm_cost(&a, Mode::Film), comm_cost(&a, Mode::All));
        prop_assert!(h < f && f < all);
        prop_assert_eq!(h, (db * c + c) as u64);
        prop_assert_eq!(f - h, (2 * w + 2 * db) as u64);
    }
}
