use criterion::{criterion_group, criterion_main, Criterion};

use qupel::centralized::{centralized_step, TrainState};
use qupel::federated::{client_local_step, run_qupel, FederatedOptions};
use qupel::RunOptions;
use qupel_bench::{federated_hyper, mlp_clients};

fn steps(c: &mut Criterion) {
    let (clients, states) = mlp_clients(10, 16, 0);
    let hp = federated_hyper(100);
    let s = &states[0];
    let loss = clients[0].loss.as_ref();
    let train = TrainState::new(s.train.x.clone(), s.train.codebook.clone(), 0, 0).unwrap();
    c.bench_function("centralized_step/mlp16", |b| b.iter(|| centralized_step(&train, loss, &hp).unwrap()));
    c.bench_function("client_local_step/mlp16", |b| b.iter(|| client_local_step(s, loss, &hp).unwrap()));
}

fn federated(c: &mut Criterion) {
    let (clients, states) = mlp_clients(10, 16, 0);
    let hp = federated_hyper(20);
    let opts = RunOptions { seed: 0, test: None, record_every: 20, subgradient_gap: false, checkpoint: None };
    let mut g = c.benchmark_group("federated");
    g.sample_size(10);
    g.bench_function("run_qupel/10x20", |b| {
        b.iter(|| run_qupel(&clients, states.clone(), &hp, &opts, FederatedOptions::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, steps, federated);
criterion_main!(benches);
