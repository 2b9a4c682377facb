use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fmvp_bench::toy_config;
use fmvp_core::config::RunMode;
use fmvp_core::experiment::{sub_seed, World};
use fmvp_core::fed::{aggregate, batch_indices, batch_loss_and_grads, batch_loss_value, ClientPayload};
use fmvp_core::model::Trainable;
use fmvp_core::promptformer::PayloadKind;

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for d_v in [16, 32] {
        let cfg = toy_config(d_v);
        let world = World::<f32>::build(&cfg, RunMode::Base2New).unwrap();
        let state = world.initial_model().unwrap();
        let client = &world.clients[0];
        let seed = sub_seed(&cfg, "federation");
        let idx = batch_indices(client.shard.len(), cfg.batch_size, seed, 0, 0, 0);
        group.bench_with_input(BenchmarkId::new("forward", d_v), &d_v, |b, _| {
            b.iter(|| batch_loss_value(&world.bundle, &state, client, &world.settings, &idx, seed, 0, 0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", d_v), &d_v, |b, _| {
            b.iter(|| {
                batch_loss_and_grads(&world.bundle, &state, client, &world.settings, Trainable::Base, &idx, seed, 0, 0).unwrap()
            })
        });
    }
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let cfg = toy_config(32);
    let world = World::<f64>::build(&cfg, RunMode::Base2New).unwrap();
    let state = world.initial_model().unwrap();
    let tensors: Vec<_> = state.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut group = c.benchmark_group("aggregate");
    for clients in [2, 8, 32] {
        let payloads: Vec<ClientPayload<f64>> = (0..clients)
            .map(|i| ClientPayload {
                client_id: i,
                kind: PayloadKind::FullParams,
                tensors: tensors.clone(),
                param_count: 0,
                train_loss: 0.0,
                initial_loss: 0.0,
            })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(clients), &payloads, |b, p| {
            b.iter(|| aggregate(&state, p).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, step, aggregation);
criterion_main!(benches);
