//! Local training and one-round federation against direct computations.

use fmvp_core::config::{Precision, RunConfig, RunMode};
use fmvp_core::experiment::{sub_seed, World};
use fmvp_core::fed::{batch_indices, batch_loss_and_grads, batch_loss_value, client_local_train, run_federation};
use fmvp_core::model::Trainable;

fn two_class_config() -> RunConfig {
    let mut cfg = RunConfig::parse(
        "precision = f64\n[federation]\nclasses_per_client = 2\nlocal_iterations = 50\nlora_threshold = -1\n\
         [optim]\nlr = 0.03\nclip_norm = 1.0\n[encoder]\nd_v = 16\nd_t = 16\ndepth = 1\nheads = 2\npatch_grid = 2\n\
         [promptformer]\nm = 2\nheads = 2\n\
         [data]\nnum_classes = 3\nbase_fraction = 0.67\nshots = 8\ntrain_per_class = 8\nattributes_per_class = 1\nnoise_std = 0.05\n",
    )
    .unwrap();
    cfg.precision = Precision::F64;
    cfg
}

#[test]
fn fifty_iterations_halve_the_two_class_loss() {
    let cfg = two_class_config();
    let world = World::<f64>::build(&cfg, RunMode::Base2New).unwrap();
    assert_eq!(world.clients.len(), 1);
    let client = &world.clients[0];
    assert_eq!(client.shard.classes().len(), 2);
    let seed = sub_seed(&cfg, "federation");
    let snapshot = world.initial_model().unwrap();
    let payload = client_local_train(&world.bundle, &snapshot, client, &world.settings, 0, seed).unwrap();

    let mut trained = snapshot.clone();
    trained.params.assign(&payload.tensors).unwrap();
    let idx = batch_indices(client.shard.len(), cfg.batch_size, seed, 0, client.id, 0);
    assert_eq!(idx.len(), client.shard.len(), "full-batch fixture");
    let before = batch_loss_value(&world.bundle, &snapshot, client, &world.settings, &idx, seed, 0, 0).unwrap();
    let after = batch_loss_value(&world.bundle, &trained, client, &world.settings, &idx, seed, 0, 0).unwrap();
    assert_eq!(before, payload.initial_loss);
    assert!(after <= 0.5 * before, "loss {before} -> {after}");
}

#[test]
fn one_round_one_step_matches_a_hand_sgd_step() {
    let mut cfg = two_class_config();
    cfg.num_classes = 8;
    cfg.base_fraction = 0.75;
    cfg.rounds = 1;
    cfg.local_iterations = 1;
    cfg.clip_norm = 0.0;
    cfg.batch_size = 5;
    let mut world = World::<f64>::build(&cfg, RunMode::Base2New).unwrap();
    let seed = sub_seed(&cfg, "federation");
    let start = world.initial_model().unwrap();

    // Expected: each client takes p - lr * (g + wd * p) from the shared start,
    // then the server averages.
    let mut stepped = Vec::new();
    for c in &world.clients {
        let idx = batch_indices(c.shard.len(), cfg.batch_size, seed, 0, c.id, 0);
        let (_, g) = batch_loss_and_grads(&world.bundle, &start, c, &world.settings, Trainable::Base, &idx, seed, 0, 0).unwrap();
        let p: Vec<Vec<f64>> = start
            .params
            .tensors()
            .iter()
            .zip(&g)
            .map(|(p, g)| {
                p.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&p, &g)| p - cfg.lr * (g + cfg.weight_decay * p))
                    .collect()
            })
            .collect();
        stepped.push(p);
    }
    let n = stepped.len() as f64;
    assert_eq!(n, 3.0);

    let fed = world.federation_config();
    let out = run_federation(&world.bundle, &mut world.clients, &world.suite, start.clone(), &fed).unwrap();
    let mut worst: f64 = 0.0;
    for (t, got) in out.server.model.params.tensors().iter().enumerate() {
        for (i, &v) in got.data().iter().enumerate() {
            let expect = stepped.iter().map(|s| s[t][i]).sum::<f64>() / n;
            worst = worst.max((v - expect).abs());
        }
    }
    assert!(worst < 1e-14, "max deviation {worst}");
    assert_ne!(out.server.model.params, start.params);
    assert_eq!(out.server.round, 1);
    assert_eq!(out.ledger.rounds(), 1);
}
